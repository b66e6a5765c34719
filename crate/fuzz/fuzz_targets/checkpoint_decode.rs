#![no_main]

use guidnoise::checkpoint::Container;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Container::decode(data) {
        let again = Container::decode(&c.encode().unwrap()).unwrap();
        assert_eq!(again.tensors.len(), c.tensors.len());
    }
});
