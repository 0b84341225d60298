//! Simulation, CSV ingestion and config-driven inference runs on top of the
//! `sckpd` core crate. The `sckpd` binary is a thin CLI over these modules.

pub mod config;
pub mod data;
pub mod error;
pub mod fit;
pub mod simulate;
pub mod summary;

pub use error::{HarnessError, Result};
