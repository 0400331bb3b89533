#![no_main]

use bnshift::batchnorm::EvalStats;
use bnshift::datagen::DomainSpec;
use bnshift::model::ModelConfig;
use bnshift::training::{ExperimentSpec, MatrixConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = ModelConfig::from_toml(text);
    let _ = ExperimentSpec::from_toml(text);
    let _ = MatrixConfig::from_toml(text);
    if let Ok(d) = DomainSpec::from_toml(text) {
        assert!(d.gain > 0.0 && d.gamma > 0.0);
    }
    if let Ok(s) = text.parse::<EvalStats>() {
        assert_eq!(s.to_string().parse::<EvalStats>().unwrap(), s);
    }
});
