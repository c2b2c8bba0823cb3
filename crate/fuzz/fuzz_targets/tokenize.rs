#![no_main]

use libfuzzer_sys::fuzz_target;
use timgan_core::text::{tokenize, Vocabulary};

fuzz_target!(|text: &str| {
    let vocab = Vocabulary::from_grammar();
    let tokens = tokenize(text, &vocab, 16);
    assert_eq!(tokens.ids.len(), 16);
    assert!(tokens.len <= 16);
    assert!(tokens.ids.iter().all(|&id| id < vocab.len()));
});
