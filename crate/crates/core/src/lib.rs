//! Strip convolutions with learned per-tap shapes, topology-aware losses
//! and metrics, and a small trainable vessel segmentation network.

mod error;
mod real;

pub mod config;
pub mod experiment;
pub mod gradcheck;
pub mod grid;
pub mod sslconv;
pub mod synthdata;
pub mod metrics;
pub mod net;
pub mod topo;

pub use error::{Error, Result};
pub use real::Real;
