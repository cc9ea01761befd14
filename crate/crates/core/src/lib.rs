//! Domain-aware depth pruning for transformer decoders.
//!
//! Activations around each block are captured on domain-tagged probe sets,
//! reduced to per-layer in/out similarity scores, and turned into layer
//! removal plans. Plans from several rankers (domain scores, linear CKA,
//! interlaced triplets, random draws) are evaluated against the unpruned
//! model on a small deterministic transformer.
//!
//! The `parallel` feature (on by default) spreads capture and sweep work
//! over a rayon pool; without it the same code runs sequentially and
//! produces identical output.

pub mod actlog;
pub mod baselines;
pub mod config;
pub mod error;
pub mod evalreport;
pub mod math;
pub mod par;
pub mod planner;
pub mod rng;
pub mod scoring;
pub mod taxonomy;
pub mod toymodel;

pub use error::{Error, Result};
pub use par::Execution;
pub use planner::{Method, PrunePlan};
pub use taxonomy::{Domain, Subtask};
