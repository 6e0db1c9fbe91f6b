//! Compatibility-guided propagation for node classification on graphs with
//! arbitrary homophily.

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod estimator;
pub mod experiment;
pub mod features;
pub mod graph;
pub mod propagation;
pub mod rng;
pub mod sinkhorn;
pub mod sparse;
pub mod synth;
pub mod theorem;
pub mod train;

pub use error::{Error, Result};
