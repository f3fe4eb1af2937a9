//! Claims-data risk prediction on per-patient medical code graphs.
//!
//! The crate covers the full desk-scale workflow:
//!
//! - [`domain`]: patients, claim records, code grouping maps and the case definition
//! - [`datagen`]: a seeded synthetic claims generator with a planted co-occurrence signal
//! - [`cohort`]: anchor/index/feature/prediction windows, inclusion criteria, labeled samples
//! - [`matching`]: stratified holdout, logistic propensity scores, 1:1 caliper matching
//! - [`gnn`]: variationally regularized encoder-decoder graph attention model with exact gradients
//! - [`baselines`]: random forest and gradient boosted trees on flat count features
//! - [`explain`]: case-vs-control relation importance from decoder attention
//! - [`eval`]: AUROC and scenario result tables
//!
//! Data-parallel inner loops go through [`exec`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iteration otherwise.

pub mod baselines;
pub mod cohort;
pub mod datagen;
pub mod domain;
pub mod error;
pub mod eval;
pub mod exec;
pub mod explain;
pub mod gnn;
pub mod matching;
pub mod seed;

pub use error::{Error, ErrorCategory, Result};

/// Crate version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
