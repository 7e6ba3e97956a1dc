//! Reverse-mode automatic differentiation sized for small physics networks.
//!
//! Values live on a [`Tape`] as dense row-major matrices. Batched network
//! evaluation puts samples (control volumes) in rows and features in
//! columns, so a single `matmul` evaluates a layer for every volume at once.

mod adam;
mod checkpoint;
mod error;
mod matrix;
mod mlp;
mod params;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use error::AutodiffError;
pub use matrix::Matrix;
pub use mlp::{Activation, Mlp, MlpConfig, OutputTransform};
pub use params::{Binding, ParamEntry, ParamGrads, ParamId, ParamStore};
pub use tape::{ElementFn, Gradients, Tape, Var};

pub type Result<T> = std::result::Result<T, AutodiffError>;
