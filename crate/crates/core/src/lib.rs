pub mod adf;
pub mod divergence;
pub mod error;
pub mod filter;
pub mod gaussian;
pub mod harness;
pub mod models;
pub mod oracle;
pub mod particle;

pub use error::{FilterError, Result};
pub use gaussian::{GaussianBelief, SpdMatrix, WeightedEnsemble};
