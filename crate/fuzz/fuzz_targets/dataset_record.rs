#![no_main]

use libfuzzer_sys::fuzz_target;
use timgan_core::scenegen::SampleRecord;

fuzz_target!(|line: &str| {
    let _ = SampleRecord::parse_line(line);
});
