//! Core library for misbehavior detection on V2X basic-safety-message streams.
//!
//! Everything in here is pure computation over in-memory values: message
//! traces and their feature encodings, a small differentiable Q-network
//! runtime, DQN training, two data-poisoning adversaries, trust-scored
//! experience transfer between detectors, and the scenario orchestration
//! that ties those together. File formats, configuration files and the
//! command line live in the companion `mds-cli` crate.
//!
//! The crate is `no_std`-compatible (with `alloc`); disable default
//! features and enable `libm` for builds without the standard library.

#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` rejects NaN; the un-negated forms clippy prefers do not.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index-parallel loops over several arrays at once read better than
// zipped iterator chains in the network math.
#![allow(clippy::needless_range_loop)]

extern crate alloc;

pub mod adversary;
pub mod agent;
pub mod error;
pub mod math;
pub mod metrics;
pub mod net;
pub mod scenario;
pub mod seeding;
pub mod split;
pub mod synth;
pub mod trace;
pub mod transfer;

pub use error::{Error, Result};
