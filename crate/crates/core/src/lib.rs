//! Adversarial-robustness toolkit for spatiotemporal traffic forecasting.
//!
//! The crate trains small graph-convolutional forecasters on sensor-network
//! speed data, selects victim sensors by time-dependent node saliency (TDNS)
//! or topology baselines, generates masked iterative gradient attacks
//! (STPGD / STMIM) under grey-, white-, and black-box access, hardens models
//! by adversarial training, scores attacks with global/local MAE and RMSE,
//! and numerically verifies a worst-case embedding-gap bound.

pub mod attack;
pub mod bound;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod defense;
pub mod error;
pub mod experiment;
pub mod forecaster;
pub mod metrics;
pub mod plot;
pub mod rng;
pub mod saliency;
pub mod tape;
pub mod tensor;

pub use error::{Result, StadvError};
pub use tensor::Tensor;
