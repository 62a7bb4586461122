//! Federated gradient-boosted forecasting of per-station bike-share demand.
//!
//! The pipeline turns raw trip logs into hourly per-station arrival/departure
//! series (`ingest`), engineers supervised-learning matrices from them
//! (`featurize`), trains boosted regression trees either centrally or per
//! client (`gbt`), aggregates client ensembles into a global forest whose
//! per-tree weights are learned collaboratively with FedProx (`fedlearn`),
//! and evaluates both variants over 1-6 hour horizons (`evalkit`).

pub mod error;
pub mod evalkit;
pub mod featurize;
pub mod fedlearn;
pub mod gbt;
pub mod ingest;
pub mod matrix;

pub use error::{Error, Result};
pub use matrix::DenseMatrix;
