#![no_main]

use libfuzzer_sys::fuzz_target;
use mixoram::storage::Snapshot;

fuzz_target!(|data: &[u8]| {
    if let Ok(snap) = Snapshot::decode(data) {
        let bytes = snap.encode();
        assert_eq!(Snapshot::decode(&bytes).unwrap().encode(), bytes);
    }
});
