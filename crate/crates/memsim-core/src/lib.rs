//! Deterministic building blocks for training a memory-construction policy on
//! synthetic multi-session dialogues, without any model inference.
//!
//! The crate is organized around the lifecycle of one training step:
//!
//! * [`synth_env`] generates seeded dialogue scripts with planted facts,
//!   distractor small talk, fact evolution, and QA items attributed to the
//!   session holding their evidence.
//! * [`memory_bank`] is the external store the policy edits through
//!   `INSERT`/`UPDATE`/`DELETE`/`NOOP` operations, with retrieval, snapshots,
//!   and evidence-coverage diagnostics.
//! * [`policy`] is a linear-softmax policy over hand-crafted features, shared
//!   between a fact-extractor role and a memory-manager role, with exact
//!   log-probabilities and score-function gradients.
//! * [`reward`] scores a bank against QA items (token F1 through a retrieval
//!   answer oracle) and charges a compression penalty for oversized banks.
//! * [`logo_grpo`] runs global rollouts and local rerollouts from shared
//!   memory snapshots, normalizes rewards into group-relative advantages, and
//!   assembles the dual-clipped surrogate objective and its exact gradient.
//!
//! Everything here is a pure function of its inputs plus an explicit seeded
//! RNG: no IO, no clocks, no global state. The `std` companion crate layers
//! file formats, the curriculum trainer, and the CLI on top.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

#[cfg(all(not(feature = "std"), not(feature = "libm")))]
compile_error!("memsim-core requires either the `std` or the `libm` feature");

pub mod logo_grpo;
pub mod math;
pub mod memory_bank;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod synth_env;
