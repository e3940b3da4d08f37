#![no_main]

use adl_core::codec::{decode_bounded_int, encode_bounded_int, BracketedString};
use libfuzzer_sys::fuzz_target;

// The first 16 bytes give the range, the rest is bracketed text.
fuzz_target!(|data: &[u8]| {
    if data.len() < 16 {
        return;
    }
    let a = i64::from_le_bytes(data[..8].try_into().unwrap());
    let b = i64::from_le_bytes(data[8..16].try_into().unwrap());
    let (lo, hi) = (a.min(b), a.max(b));
    let Ok(s) = BracketedString::deserialize(&data[16..]) else {
        return;
    };
    if let Ok(v) = decode_bounded_int(&s, lo, hi) {
        assert!((lo..=hi).contains(&v));
        assert!(encode_bounded_int(v, lo, hi).unwrap().bits().eq(s.bits()));
    }
});
