#![no_main]

use libfuzzer_sys::fuzz_target;
use timgan_core::image_io::decode_png;

fuzz_target!(|bytes: &[u8]| {
    if let Ok(img) = decode_png(bytes) {
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
