#![no_main]

use adl_core::codec::BracketedString;
use adl_core::sketch::{decode_sketch, encode_sketch, Shape};
use libfuzzer_sys::fuzz_target;

// Header bytes: rows, cols, k, norm bound; then bracketed text.
fuzz_target!(|data: &[u8]| {
    if data.len() < 4 {
        return;
    }
    let dims = Shape::matrix(1 + data[0] as usize % 8, 1 + data[1] as usize % 8);
    let k = 1 + data[2] as usize % 16;
    let m = data[3] as f64 / 16.0;
    let Ok(code) = BracketedString::deserialize(&data[4..]) else {
        return;
    };
    if let Ok(s) = decode_sketch(&code, dims, k, m) {
        assert_eq!(s.terms.len(), k);
        // the decoder reads leaf bits only, so compare bits rather than trees
        let again = encode_sketch(&s, m).unwrap();
        assert!(again.bits().eq(code.bits()));
        assert_eq!(decode_sketch(&again, dims, k, m).unwrap(), s);
    }
});
