//! Trajectory representation learning with grid, road-network and
//! spatio-temporal branches trained by contrastive pretraining.

pub mod error;
pub mod masking;
pub mod config;
pub mod data;
pub mod downstream;
pub mod encoder;
pub mod numerics;
pub mod pipeline;
pub mod spatiotemporal;
pub mod training;

pub use error::{Result, TigrError};

#[cfg(test)]
mod testutil;
