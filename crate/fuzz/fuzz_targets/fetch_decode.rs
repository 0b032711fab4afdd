#![no_main]

use libfuzzer_sys::fuzz_target;
use mixoram::wire::{decode_fetch, encode_fetch};

fuzz_target!(|data: &[u8]| {
    if let Ok(slots) = decode_fetch(data) {
        assert_eq!(decode_fetch(&encode_fetch(&slots)).unwrap(), slots);
    }
});
