#![no_main]

use libfuzzer_sys::fuzz_target;
use mixoram::wire::{decode_batch, encode_batch};

// first byte picks the cell length
fuzz_target!(|data: &[u8]| {
    let Some((&len, payload)) = data.split_first() else { return };
    let cell_len = len as usize + 1;
    if let Ok(batch) = decode_batch(payload, cell_len) {
        assert!(batch.iter().all(|(_, c)| c.len() == cell_len));
        assert_eq!(decode_batch(&encode_batch(&batch), cell_len).unwrap(), batch);
    }
});
