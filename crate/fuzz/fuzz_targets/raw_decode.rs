#![no_main]

use guidnoise::image::ImagePatch;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = ImagePatch::decode_raw(data) {
        assert_eq!(img.len(), img.height() * img.width() * img.channels());
    }
});
