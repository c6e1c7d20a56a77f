//! Learns spatial interaction rules from driving scene snapshots with a
//! modulated PCFG, segments episodes into events by parse-tree identity,
//! learns the temporal order of events, and predicts how an in-progress
//! episode continues.

pub mod cnf;
pub mod error;
pub mod events;
pub mod persist;
pub mod pipeline;
pub mod scenario;
pub mod spatial;
pub mod temporal;
pub mod tree;

pub use error::{Error, Result};
