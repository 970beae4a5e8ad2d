//! Reproducible campaigns: configuration, on-disk artifacts and the end-to-end workflow.

pub mod config;
pub mod stages;
pub mod store;

pub use config::{CampaignConfig, derive_seed};
pub use stages::*;
pub use store::Campaign;
