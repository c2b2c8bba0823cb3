#![no_main]

use libfuzzer_sys::fuzz_target;
use timgan_core::checkpoint::Manifest;

fuzz_target!(|text: &str| {
    let _ = Manifest::parse(text);
});
