#![no_main]

use ibtpo_cli::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_toml(text) {
        if cfg.validate().is_ok() {
            assert_eq!(RunConfig::from_toml(&cfg.to_toml()).expect("re-parse"), cfg);
        }
    }
});
