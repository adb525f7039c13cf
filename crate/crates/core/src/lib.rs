//! Lightweight CNN-Transformer segmentation network on a small tensor engine.

pub mod cost;
pub mod engine;
pub mod error;
pub mod network;
pub mod nn;
pub mod suite;
pub mod train;

pub use error::{Error, Result};
