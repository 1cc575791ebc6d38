#![no_main]

use libfuzzer_sys::fuzz_target;
use relgate::streams::StreamSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = StreamSpec::from_toml(text) {
        let back = StreamSpec::from_toml(&spec.to_toml()).expect("serialized spec parses");
        assert_eq!(back.to_toml(), spec.to_toml());
    }
});
