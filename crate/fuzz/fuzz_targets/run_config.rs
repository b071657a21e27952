#![no_main]

use libfuzzer_sys::fuzz_target;
use sddm_cli::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_json_str(text) {
        let again = RunConfig::from_json_str(&cfg.to_json()).expect("serialised config parses");
        assert_eq!(cfg.to_json(), again.to_json());
        let _ = cfg.validate();
    }
});
