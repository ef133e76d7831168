#![no_main]

use libfuzzer_sys::fuzz_target;
use medose::Dataset;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = Dataset::from_reader(data) {
        let _ = ds.summarize();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).expect("write");
        let back = Dataset::from_reader(buf.as_slice()).expect("reparse own output");
        assert_eq!(back.len(), ds.len());
    }
});
