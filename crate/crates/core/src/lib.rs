//! Concept embeddings in vision-model activations: body-part masks from
//! keypoint annotations, linear concept models trained on cached activations,
//! and the metrics used to compare them.

pub mod error;
pub mod maskgen;
pub mod metrics;
pub mod model;
pub mod skeleton;
pub mod synthetic;
pub mod tensors;
pub mod train;

pub use error::{Error, Result};
