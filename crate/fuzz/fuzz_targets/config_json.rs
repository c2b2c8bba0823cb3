#![no_main]

use libfuzzer_sys::fuzz_target;
use timgan_core::scenegen::DatasetConfig;
use timgan_core::training::TrainConfig;

fuzz_target!(|text: &str| {
    if let Ok(cfg) = TrainConfig::from_json(text) {
        cfg.validate().unwrap();
    }
    let _ = DatasetConfig::from_json(text);
});
