#![no_main]

use libfuzzer_sys::fuzz_target;
use medose::estimators::FitResult;
use medose::inference::ed_table;
use medose::marginal::Method;

fuzz_target!(|data: &[u8]| {
    let Ok(fit) = FitResult::from_json_slice(data) else { return };
    let json = fit.to_json().expect("serialize");
    let back = FitResult::from_json_str(&json).expect("reparse own output");
    assert_eq!(back.beta_hat.len(), fit.beta_hat.len());
    // conditional doses are closed form, so this stays cheap
    let method = if fit.random_spec.is_some() { Method::Conditional } else { Method::Marginal };
    let _ = ed_table(&fit, &[0.1, 0.5, 0.9], method, 1);
});
