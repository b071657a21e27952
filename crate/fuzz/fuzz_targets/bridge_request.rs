#![no_main]

use libfuzzer_sys::fuzz_target;
use sddm_core::scores::bridge::{decode_f32, parse_request, Request};

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else { return };
    if let Ok(req) = parse_request(line) {
        let again = parse_request(&req.to_line()).expect("serialised request parses");
        assert_eq!(req, again);
        if let Request::Score { shape, data, .. } = &req {
            let _ = decode_f32(data, *shape);
        }
    }
});
