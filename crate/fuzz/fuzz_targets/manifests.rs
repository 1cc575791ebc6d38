#![no_main]

use libfuzzer_sys::fuzz_target;
use relgate::model::ParamsManifest;
use relgate::streams::DegradedManifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = DegradedManifest::from_toml(text) {
        let _ = DegradedManifest::from_toml(&m.to_toml()).expect("serialized manifest parses");
    }
    if let Ok(m) = ParamsManifest::from_json(text) {
        let _ = m.verify(data);
        assert_eq!(ParamsManifest::from_json(&m.to_json()).expect("serialized manifest parses"), m);
    }
});
