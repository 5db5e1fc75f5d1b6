//! Class-agnostic object counting from dot annotations and a handful of
//! exemplar boxes.
//!
//! The crate covers the full pipeline: annotation ingestion, Gaussian
//! density-map ground truth, mosaic training-data synthesis, a transformer
//! counter with exemplar cross-attention, masked-autoencoder pre-training,
//! supervised fine-tuning, sliding-window inference with test-time
//! corrections, and MAE/RMSE evaluation.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod imgbuf;
pub mod inference;
pub mod model;
pub mod mosaic;
pub mod rng;
pub mod toy;
pub mod training;
pub mod viz;

pub use error::{Error, Result};
