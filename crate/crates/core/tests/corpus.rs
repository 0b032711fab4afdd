//! Replays the checked-in fuzz seeds through the decoders the fuzz targets
//! exercise, so the seeds stay valid as the formats evolve.

use std::fs;
use std::path::PathBuf;

use mixoram::harness::parse_config;
use mixoram::storage::Snapshot;
use mixoram::wire::{decode_batch, decode_fetch, encode_fetch, Frame, MixInstruction};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn frame_seeds_round_trip() {
    for (name, b) in seeds("frame_decode") {
        let (f, used) = Frame::decode(&b).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(used, b.len(), "{name}");
        assert_eq!(f.encode(), b, "{name}");
    }
}

#[test]
fn instruction_and_snapshot_seeds_round_trip() {
    for (name, b) in seeds("instruction_decode") {
        assert_eq!(MixInstruction::decode(&b).unwrap().encode(), b, "{name}");
    }
    for (name, b) in seeds("snapshot_decode") {
        assert_eq!(Snapshot::decode(&b).unwrap().encode(), b, "{name}");
    }
}

#[test]
fn batch_and_fetch_seeds_decode() {
    for (name, b) in seeds("batch_decode") {
        let cell_len = b[0] as usize + 1;
        if name != "tiny" {
            assert_eq!(decode_batch(&b[1..], cell_len).unwrap().len(), 3, "{name}");
        }
    }
    for (name, b) in seeds("fetch_decode") {
        assert_eq!(encode_fetch(&decode_fetch(&b).unwrap()), b, "{name}");
    }
}

#[test]
fn config_seeds() {
    for (name, b) in seeds("config_parse") {
        let parsed = parse_config(std::str::from_utf8(&b).unwrap());
        assert_eq!(parsed.is_ok(), name != "bad", "{name}");
    }
}
