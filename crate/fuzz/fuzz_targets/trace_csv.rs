#![no_main]

use libfuzzer_sys::fuzz_target;
use relgate::adapter::{read_trace_csv, write_trace_csv};

fuzz_target!(|data: &[u8]| {
    if let Ok(trace) = read_trace_csv(data) {
        let mut once = Vec::new();
        write_trace_csv(&trace, &mut once).expect("trace writes");
        let again = read_trace_csv(once.as_slice()).expect("written trace parses");
        let mut twice = Vec::new();
        write_trace_csv(&again, &mut twice).expect("trace writes");
        assert_eq!(once, twice);
    }
});
