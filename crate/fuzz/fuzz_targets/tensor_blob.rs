#![no_main]

use libfuzzer_sys::fuzz_target;
use timgan_core::checkpoint::{decode_tensor, encode_tensor};

fuzz_target!(|input: (Vec<u8>, Vec<u8>)| {
    let (shape, bytes) = input;
    let shape: Vec<usize> = shape.iter().take(4).map(|&d| d as usize % 9).collect();
    if let Ok(a) = decode_tensor(&bytes, &shape) {
        assert_eq!(a.shape(), &shape[..]);
        assert_eq!(encode_tensor(&a), bytes);
    }
});
