#![no_main]

use libfuzzer_sys::fuzz_target;
use timgan_service::api::{parse_create_request, parse_edit_request};

fuzz_target!(|body: &[u8]| {
    let _ = parse_create_request(body, 64);
    if let Ok(text) = parse_edit_request(body) {
        assert!(!text.trim().is_empty());
    }
});
