use std::io;

use thiserror::Error;

/// Errors raised by the protocol library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("identity element is not a valid public value")]
    IdentityElement,
    #[error("unsupported security parameter: {0} bits (expected 128 or 256)")]
    UnsupportedKappa(u32),
    #[error("invalid group element encoding")]
    InvalidEncoding,
    #[error("size mismatch: expected {expected} bytes, got {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("counter {counter} out of range for {n} slots")]
    CounterOutOfRange { counter: u64, n: usize },
    #[error("{m} mixes do not evenly divide {n} records")]
    Indivisible { n: usize, m: usize },
    #[error("weights do not form a probability vector (sum = {0})")]
    NotAProbabilityVector(f64),
    #[error("slot {slot} out of range (len {len})")]
    OutOfRange { slot: usize, len: usize },
    #[error("bad mix instruction: {0}")]
    BadInstruction(String),
    #[error("phase order violation: expected {expected}, got {got}")]
    PhaseOrderViolation { expected: String, got: String },
    #[error("round {round}: batch from mix {from} missing")]
    MissingBatch { round: u16, from: u8 },
    #[error("cache is full, eviction required")]
    CacheFull,
    #[error("client state is stale: {0}")]
    StaleState(String),
    #[error("trial decryption exhausted the key history for virtual index {0}")]
    ExhaustedHistory(usize),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("malformed frame: {0}")]
    Frame(String),
    #[error("malformed snapshot: {0}")]
    Snapshot(String),
    #[error("malformed config: {0}")]
    Config(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
