#![no_main]

use libfuzzer_sys::fuzz_target;
use relgate::model::{decode_params, encode_params};

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = decode_params(data) {
        assert_eq!(encode_params(&p), data);
    }
});
