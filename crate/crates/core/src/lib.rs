//! Finite volume neural networks: model assembly, time integration,
//! synthetic data generation, training, evaluation and laboratory data
//! ingestion.

pub mod datagen;
pub mod error;
pub mod evaluator;
pub mod family;
pub mod integrator;
pub mod lab;
pub mod model;
pub mod pde;
pub mod trainer;

pub use error::{CoreError, Result};
