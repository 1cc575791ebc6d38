#![no_main]

use libfuzzer_sys::fuzz_target;
use relgate::experiment::read_summary;

fuzz_target!(|data: &[u8]| {
    let _ = read_summary(data);
});
