//! Oblivious RAM whose eviction is delegated to a mix-net.
//!
//! The client keeps a small cache on an untrusted server and, once it
//! fills, hands the shuffle-and-re-encrypt step to a set of mixes. Four
//! eviction designs are provided: a cascade or a stratified (parallel)
//! network, with records either wrapped in a new layer each epoch or
//! re-encrypted from scratch.

pub mod client;
pub mod error;
pub mod group;
pub mod harness;
pub mod mixnode;
pub mod net;
pub mod rounds;
pub mod shuffle;
pub mod storage;
pub mod sym;
pub mod wire;

pub use error::{Error, Result};
