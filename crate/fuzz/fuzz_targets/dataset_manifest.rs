#![no_main]

use bnshift::datagen::DatasetManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = DatasetManifest::from_json(text) {
            assert!(m.records.iter().all(|r| !r.file.contains('/')));
        }
    }
});
