#![no_main]

use libfuzzer_sys::fuzz_target;
use sddm_cli::image_io::{decode_png, encode_png};

fuzz_target!(|data: &[u8]| {
    if let Ok(png) = decode_png(data) {
        let (c, h, w) = png.image.dim();
        assert!(c == 1 || c == 3);
        assert!(png.image.iter().all(|v| (-1.0..=1.0).contains(v)));
        let bytes = encode_png(&png.image, png.config.as_deref()).expect("decoded image re-encodes");
        let again = decode_png(&bytes).expect("re-encoded image decodes");
        assert_eq!(again.image.dim(), (c, h, w));
        assert_eq!(again.image, png.image);
    }
});
