//! Deterministic simulator and protocol library for semantic data-source
//! discovery across virtual organizations that each use their own domain
//! ontology.

pub mod chord;
pub mod discovery;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod network;
pub mod ontology;
pub mod overlay;
pub mod scenario;
pub mod sim;

pub use error::{Error, Result};
