#![no_main]

use adl_core::compressor::NetworkSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(net) = NetworkSpec::from_json_str(text) {
        let back = NetworkSpec::from_json_str(&net.to_json()).expect("written network parses");
        assert_eq!(back, net);
    }
});
