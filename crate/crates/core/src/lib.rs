//! Rare-upset generation, prediction and avoidance for a pumping-cycle airborne wind
//! energy system.

pub mod error;
pub mod campaign;
pub mod closedloop;
pub mod frames;
pub mod guidance;
pub mod losseval;
pub mod plant;
pub mod predictor;
pub mod subsim;
pub mod windfield;

pub use error::{Error, Result};
