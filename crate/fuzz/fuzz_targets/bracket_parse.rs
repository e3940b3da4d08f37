#![no_main]

use adl_core::codec::BracketedString;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = BracketedString::deserialize(data) {
        let text = s.serialize();
        let back = BracketedString::deserialize(&text).expect("canonical text parses");
        assert_eq!(back, s);
        assert_eq!(back.serialize(), text);
    }
});
