#![no_main]

use libfuzzer_sys::fuzz_target;
use medose::simulation::parse_scenario;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(s) = parse_scenario(text) {
            s.validate().expect("parsed scenarios are valid");
        }
    }
});
