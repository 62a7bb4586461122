//! Orchestration layer over the velofed library: a single JSON config drives
//! ingest, training (centralized and federated), evaluation, and reporting.
//!
//! Everything here is deterministic given config + seed: artifacts carry a
//! stamp {config hash, seed, code version} and stages refuse to mix artifacts
//! produced under a different configuration.

pub mod artifacts;
pub mod config;
pub mod pipeline;
