//! Generative models for heterogeneous, partially observed tabular data.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod heads;
pub mod hivae;
pub mod mae;
pub mod model;
pub mod ood;
pub mod schema;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
