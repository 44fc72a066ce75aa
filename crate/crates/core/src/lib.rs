//! Deterministic federated-learning simulator.
//!
//! Clients train a small proxy model on their private data, optionally
//! supervised by frozen client-local teacher models through logit-level KL
//! distillation. Only proxy parameters are ever aggregated by the server.
//! FedAvg, FedProx and FML are provided as baselines.
//!
//! Module map:
//! - [`nn`]: dense classifier with group normalization, manual backprop, SGD.
//! - [`losses`]: cross-entropy, multi-teacher KL distillation, proximal and
//!   mutual-learning losses.
//! - [`data`]: datasets, synthetic blobs, IID / Dirichlet / class-split partitions.
//! - [`teachers`]: frozen teacher models and precomputed logits tables.
//! - [`federation`]: the round loop, local updates, aggregation, evaluation.
//! - [`io`]: binary checkpoint, dataset and logits-table formats; metrics CSV.
//! - [`config`]: run configuration files.
//! - [`report`]: multi-trial summaries.

pub mod config;
pub mod data;
mod error;
pub mod federation;
pub mod io;
pub mod losses;
mod matrix;
pub mod nn;
pub mod report;
pub mod rng;
pub mod teachers;

pub use error::{Error, FormatError, Result};
pub use matrix::Matrix;
