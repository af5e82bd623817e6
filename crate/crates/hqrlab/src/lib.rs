//! Tiled QR factorization laboratory.
//!
//! The crate factors an `mt x nt` grid of `b x b` tiles with Householder
//! kernels driven by an *elimination list*: the ordered sequence of
//! `elim(victim, pivot, panel)` row combinations that fully determines a
//! tiled QR algorithm. On top of that sit generators for flat, binary,
//! greedy and Fibonacci reduction trees, a hierarchical four-level
//! generator over a virtual cluster grid, kernel-level task-DAG
//! construction with critical-path and communication analysis, and a
//! shared-memory dataflow executor with numerical verification.

pub mod hqr;
pub mod kernels;
pub mod runtime;
pub mod taskgraph;
pub mod tile_store;
pub mod trees;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("elimination list is invalid: {0} violation(s), first: {1}")]
    Validation(usize, String),
    #[error("reflector store is corrupted: {0}")]
    CorruptedStore(String),
    #[error("task graph contains a cycle involving task {0}")]
    Cycle(usize),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
