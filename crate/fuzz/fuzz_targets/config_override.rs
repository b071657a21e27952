#![no_main]

use libfuzzer_sys::fuzz_target;
use sddm_cli::config::{apply_override, RunConfig};

// first line is the assignment, the rest an optional JSON document
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (assignment, doc) = text.split_once('\n').unwrap_or((text, ""));
    let mut value = if doc.trim().is_empty() {
        RunConfig::default().to_value()
    } else {
        match serde_json::from_str(doc) {
            Ok(v) => v,
            Err(_) => return,
        }
    };
    if apply_override(&mut value, assignment).is_ok() {
        let _ = RunConfig::from_value(value);
    }
});
