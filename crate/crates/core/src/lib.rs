//! Product-based neural networks for click-through-rate prediction.

pub mod analysis;
pub mod cli;
pub mod compute;
pub mod config;
pub mod data;
pub mod error;
pub mod extractors;
pub mod featuremap;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod train;

pub use error::{Error, Result};
