//! Deterministic laboratory for reversible behavioral adaptation.
//!
//! The crate provides a small feed-forward next-token model whose core
//! parameters stay frozen while removable low-rank behavioral modules are
//! attached, trained, eliminated, or unloaded at runtime. Weight-space
//! mutation and fine-tuning operate on the core directly. A metrics layer
//! (KL/JS divergence, recoverability factor, identity leakage, structural
//! variance) and a config-driven experiment harness sit on top.
//!
//! Everything is seeded and replayable: identical specs produce
//! byte-identical records.

#![forbid(unsafe_code)]

pub mod adaptation;
pub mod adapter;
pub mod config;
pub mod error;
pub mod experiments;
mod fileio;
pub mod harness;
pub mod json;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod report;
pub mod rng;
pub mod specfile;
mod train;

pub use adaptation::{
    adapt_behavioral, adapt_weights, rollback_heuristic, AdaptationTask, LayerStats, MutationMode,
    MutationSpec,
};
pub use adapter::{BehavioralModule, ModuleState, PerturbationSpec};
pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::{
    forward, forward_all, forward_all_seq, init_core, CoreParams, OutputDistribution, Prompt,
};
pub use train::{grad_check, grad_check_with_step};
