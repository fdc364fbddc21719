//! Prediction of speech-critical cortical electrodes from multi-channel
//! intracranial recordings.
//!
//! The pipeline mirrors a two-stage design: a trial-level classifier scores
//! every electrode-trial from signal, anatomy and connectivity features,
//! then an electrode-level aggregator turns each electrode's score
//! distribution into a single verdict.
//!
//! ```text
//! recordings --CAR--> (high-gamma envelope) --epochs--> features
//!     features = [prototype correlations | mean activity | region one-hot
//!                 | strength, eigenvector centrality, clustering]
//!     stage 1: linear/RBF SVM, logistic regression or 2-layer MLP
//!     stage 2: score averaging, or 10-bin histogram (+ region) -> MLP
//!     evaluation: stratified 8-fold CV or leave-one-subject-out
//! ```
//!
//! The `synthgen` module plants ground truth in synthetic datasets so the
//! whole pipeline can be validated end to end without clinical data; the
//! `pipeline` module orchestrates runs from a single JSON config.

pub mod aggregate;
pub mod cache;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod graph;
pub mod models;
pub mod nmf;
pub mod pipeline;
pub mod seed;
pub mod signal;
pub mod stats;
pub mod synthgen;

pub use error::{Error, Result};
pub use pipeline::{run_grid, run_pipeline, run_until, GridAxes, PipelineConfig, RunStage};
