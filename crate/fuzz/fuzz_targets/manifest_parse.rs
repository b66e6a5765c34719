#![no_main]

use guidnoise::data::parse_manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(rows) = parse_manifest(text) {
            for r in rows {
                let _ = r.spec();
            }
        }
    }
});
