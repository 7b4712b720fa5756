#![no_main]

use libfuzzer_sys::fuzz_target;

use cdma::runconfig::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(cfg) = RunConfig::from_json(text) else {
        return;
    };
    // Accepted configs must hash and re-serialize cleanly.
    let hash = cfg.config_hash();
    let json = serde_json::to_string(&cfg).expect("config serializes");
    let again = RunConfig::from_json(&json).expect("reparse of rendered config");
    assert_eq!(hash, again.config_hash());
});
