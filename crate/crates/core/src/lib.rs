//! In-context tabular prediction with a test-masked transformer pre-trained on
//! synthetic data from random and adversarially updated MLP generators.

pub mod agents;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod prior;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
