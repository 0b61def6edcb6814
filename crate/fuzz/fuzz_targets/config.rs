#![no_main]

use cfdt::experiment::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

// First byte picks the syntax: even for JSON, odd for TOML.
fuzz_target!(|data: &[u8]| {
    let Some((&flag, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    if let Ok(cfg) = ExperimentConfig::parse(text, flag % 2 == 1) {
        let json = serde_json::to_string(&cfg).expect("config serializes");
        assert_eq!(ExperimentConfig::parse(&json, false).expect("re-parse"), cfg);
    }
});
