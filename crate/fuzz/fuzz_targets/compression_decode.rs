#![no_main]

use std::sync::LazyLock;

use adl_core::codec::BracketedString;
use adl_core::compressor::{CompressionPlan, CompressorConfig, NetworkCompressor, NetworkSpec, SampleSet};
use libfuzzer_sys::fuzz_target;

const NET: &str = r#"{"dims":[2,3,1],"activation":"softplus","layers":[[0.5,0,0,0.5,0.25,-0.25],[1,-1,0.5]],"r":1.5,"R":2}"#;

static PLAN: LazyLock<CompressionPlan> = LazyLock::new(|| {
    let net = NetworkSpec::from_json_str(NET).unwrap();
    let samples = SampleSet::in_default_ball(vec![vec![1.0, 0.0], vec![-0.5, 0.5]]).unwrap();
    NetworkCompressor::new(&net, &samples, &CompressorConfig::default()).unwrap().plan().clone()
});

fuzz_target!(|data: &[u8]| {
    let Ok(code) = BracketedString::deserialize(data) else {
        return;
    };
    if let Ok(node) = PLAN.decode(&code) {
        let again = PLAN.encode(&node);
        assert!(again.bits().eq(code.bits()));
        assert_eq!(PLAN.decode(&again).unwrap(), node);
        let _ = PLAN.evaluate(&node);
    }
});
