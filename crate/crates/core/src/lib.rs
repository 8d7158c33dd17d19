//! Equivariant capsule embeddings for self-supervised learning of 3D pose.

pub mod error;
pub mod evaluation;
pub mod capsnet;
pub mod cli;
pub mod geometry;
pub mod losses;
pub mod selfcheck;
pub mod synthscene;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
