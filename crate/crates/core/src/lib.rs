//! Single-layer linear self-attention for in-context binary classification under
//! ℓ∞ query perturbations: model, data, closed-form theory, training and evaluation.

pub mod distributions;
pub mod error;
pub mod eval;
pub mod model;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
