//! Replays the checked-in fuzz seeds through the same entry points as the
//! fuzz targets.

use std::fs;
use std::path::{Path, PathBuf};

use medose::estimators::FitResult;
use medose::inference::ed_table;
use medose::marginal::Method;
use medose::simulation::parse_scenario;
use medose::Dataset;

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut files: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert!(!files.is_empty(), "no seeds in {}", dir.display());
    files.into_iter().map(|p| (p.clone(), fs::read(&p).unwrap())).collect()
}

#[test]
fn csv_seeds() {
    let mut parsed = 0;
    for (path, bytes) in seeds("load_csv") {
        if let Ok(ds) = Dataset::from_reader(bytes.as_slice()) {
            let mut buf = Vec::new();
            ds.write_csv(&mut buf).unwrap();
            let back = Dataset::from_reader(buf.as_slice()).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert_eq!(back, ds, "{}", path.display());
            parsed += 1;
        }
    }
    assert!(parsed >= 2);
}

#[test]
fn fit_json_seeds() {
    let mut parsed = 0;
    for (path, bytes) in seeds("fit_result_json") {
        let Ok(fit) = FitResult::from_json_slice(&bytes) else { continue };
        let back = FitResult::from_json_str(&fit.to_json().unwrap()).unwrap();
        assert_eq!(back, fit, "{}", path.display());
        let method = if fit.random_spec.is_some() { Method::Conditional } else { Method::Marginal };
        let table = ed_table(&fit, &[0.1, 0.5, 0.9], method, 1).unwrap();
        assert_eq!(table.rows.len(), 3 * fit.curves.len());
        parsed += 1;
    }
    assert!(parsed >= 3);
}

#[test]
fn scenario_seeds() {
    let mut parsed = 0;
    for (_, bytes) in seeds("scenario_config") {
        if let Ok(s) = parse_scenario(std::str::from_utf8(&bytes).unwrap()) {
            s.validate().unwrap();
            parsed += 1;
        }
    }
    assert!(parsed >= 3);
}
