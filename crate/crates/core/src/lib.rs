//! Forking-token detection and rationale tooling for language-model responses.

pub mod dataset;
pub mod gateway;
pub mod paro;
pub mod report;
pub mod reward;
pub mod rftd;
pub mod seed;

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
