#![no_main]

use libfuzzer_sys::fuzz_target;
use timgan_core::text::Vocabulary;

fuzz_target!(|text: &str| {
    if let Ok(vocab) = Vocabulary::from_json(text) {
        let again = Vocabulary::from_json(&vocab.to_json()).unwrap();
        assert_eq!(again.len(), vocab.len());
    }
});
