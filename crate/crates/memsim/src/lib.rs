//! Training harness, file formats, and CLI around `memsim-core`.
//!
//! The core crate holds the pure algorithmic pieces; this crate adds
//! everything that touches the outside world: declarative TOML configs with
//! stable hashes, the curriculum trainer with worker fan-out, metrics
//! emission (JSONL + CSV), versioned text artifacts, and the `memsim`
//! binary's `train` / `eval` / `ablate` / `inspect` commands.

pub mod cli;
pub mod config;
pub mod formats;
pub mod metrics;
pub mod trainer;
