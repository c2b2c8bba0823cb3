#![no_main]

use libfuzzer_sys::fuzz_target;
use timgan_core::scenegen::Instruction;

fuzz_target!(|text: &str| {
    // Anything that parses must render back to text that parses the same.
    if let Ok(inst) = Instruction::parse(text) {
        assert_eq!(Instruction::parse(&inst.text()).unwrap(), inst);
    }
});
