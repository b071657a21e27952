#![no_main]

use libfuzzer_sys::fuzz_target;
use sddm_core::energy::FeatureExtractor;

fuzz_target!(|data: &[u8]| {
    if let Ok(fe) = FeatureExtractor::from_bytes(data) {
        let again = FeatureExtractor::from_bytes(&fe.to_bytes()).expect("round trip");
        assert_eq!(fe.weights(), again.weights());
        assert_eq!(fe.out_channels(), again.out_channels());
    }
});
