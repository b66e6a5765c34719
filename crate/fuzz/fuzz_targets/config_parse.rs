#![no_main]

use std::path::Path;

use guidnoise::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = RunConfig::parse(text, Path::new("fuzz.cfg")) {
            let text = cfg.to_text().unwrap();
            let back = RunConfig::parse(&text, Path::new("resolved.cfg")).unwrap();
            assert_eq!(back.to_text().unwrap(), text);
        }
    }
});
