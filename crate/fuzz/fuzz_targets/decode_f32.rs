#![no_main]

use libfuzzer_sys::fuzz_target;
use sddm_core::scores::bridge::{decode_f32, encode_f32};

// first three bytes pick the shape, the rest is the base64 payload
fuzz_target!(|data: &[u8]| {
    if data.len() < 3 {
        return;
    }
    let shape = [data[0] as usize % 5, data[1] as usize % 9, data[2] as usize % 9];
    let Ok(payload) = std::str::from_utf8(&data[3..]) else { return };
    if let Ok(img) = decode_f32(payload, shape) {
        assert_eq!(img.len(), shape.iter().product::<usize>());
        let back = decode_f32(&encode_f32(&img), shape).expect("re-encoded payload decodes");
        assert!(img.iter().zip(back.iter()).all(|(a, b)| a.to_bits() == b.to_bits() || a.is_nan() && b.is_nan()));
    }
});
