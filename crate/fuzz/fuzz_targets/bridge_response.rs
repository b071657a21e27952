#![no_main]

use libfuzzer_sys::fuzz_target;
use sddm_core::scores::bridge::{decode_f32, parse_response};

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    if let Ok(resp) = parse_response(line) {
        assert!(resp.ok || resp.error.is_some());
        if let Some(payload) = &resp.data {
            let _ = decode_f32(payload, [1, 4, 4]);
        }
    }
});
