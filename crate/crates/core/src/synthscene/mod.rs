//! Procedural multi-view object dataset.
//!
//! Objects from a small library of parametric classes are placed with a
//! translate-then-rotate pose and rendered by a software rasterizer; every
//! view keeps its generating latents.

pub mod dataset;
pub mod latents;
pub mod objects;
pub mod render;

pub use dataset::{generate_dataset, Dataset, DatasetConfig, DatasetManifest, Split, ViewPair, ViewRecord};
pub use latents::{sample_latents, SceneLatents};
pub use objects::ObjectSpec;
pub use render::{render, Image};
