pub mod analysis;
pub mod cli;
pub mod error;
pub mod linalg;
pub mod operators;
pub mod pivot;
pub mod scores;
pub mod synth;
pub mod tensorstore;

pub use error::{Error, Result};

/// Dense float64 matrix used for all internal computation.
pub type Matrix = nalgebra::DMatrix<f64>;
