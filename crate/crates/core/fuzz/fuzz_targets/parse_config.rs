#![no_main]

use epoa::pipeline::{PipelineConfig, Stage};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(config) = PipelineConfig::from_toml(text) else {
        return;
    };
    let _ = config.validate(&Stage::ALL);
    let again = PipelineConfig::from_toml(&config.to_toml()).unwrap();
    assert_eq!(again.hash(), config.hash());
});
