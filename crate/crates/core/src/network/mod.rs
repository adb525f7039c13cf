//! Full network assembly, configuration and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod model;

pub use config::{NetworkConfig, TransformerConfig, TAP_SCALES};
pub use model::{ForwardOutputs, ForwardVars, Lmiinet};
