#![no_main]

use adl_core::compressor::SampleSet;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = SampleSet::from_csv_reader(data) {
        let back = SampleSet::from_csv_reader(s.to_csv().as_bytes()).expect("written samples parse");
        assert_eq!(back.points.len(), s.points.len());
    }
});
