//! Split conformal prediction with information-theoretic entropy bounds.
//!
//! The crate is organized around a small set of shared types
//! ([`data::LabeledDataset`], [`data::ProbVector`], [`data::PredictionSet`])
//! and the pipelines built on top of them:
//!
//! - [`scores`] / [`conformal`]: nonconformity scores, split-conformal
//!   calibration and hard prediction sets, including Mondrian
//!   (group-balanced) calibration.
//! - [`bounds`]: upper bounds on the conditional entropy `H(Y|X)` evaluated
//!   from a conformal run, with per-term breakdowns.
//! - [`setsize`]: lower bounds on prediction-set size via quantized entropy
//!   estimation (k-means + plug-in entropy with Miller-Madow correction).
//! - [`autodiff`] / [`diffsort`] / [`training`]: a small reverse-mode tape,
//!   differentiable sorting networks and the conformal-training loop with
//!   six loss functions.
//! - [`sideinfo`]: Bayes-rule posterior updates from discrete side
//!   information, with a missing-information fallback.
//! - [`federated`]: Dirichlet device partitioning, federated averaging and
//!   the entropy decomposition oracle.
//! - [`datagen`]: synthetic tasks with analytic entropy oracles plus CSV,
//!   IDX and columnar-binary loaders.
//!
//! All entropies are in nats. All randomness is explicit-state and seeded:
//! identical seeds and inputs produce bit-identical outputs.

pub mod autodiff;
pub mod bounds;
pub mod conformal;
pub mod data;
pub mod datagen;
pub mod diffsort;
pub mod error;
pub mod federated;
pub mod repro;
pub mod rng;
pub mod scores;
pub mod setsize;
pub mod sideinfo;
pub mod training;

pub use data::{binary_entropy, coverage, inefficiency, LabeledDataset, PredictionSet, ProbVector, RngSeed};
pub use error::{Error, Result};
