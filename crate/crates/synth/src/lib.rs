//! Synthetic depth and mask sequences with exact ground truth.
//!
//! A [`scene::SceneScript`] describes a rope or cloth on a table, kinematic
//! handles that drive it, an optional floating box occluder and the camera.
//! [`sim`] steps the object with position-based dynamics, [`render`] ray-casts
//! depth and mask, and [`dataset`] writes the result in the layout read by
//! `occtrack::io::Dataset`.

pub mod dataset;
pub mod metrics;
pub mod render;
pub mod scene;
pub mod sim;

pub use dataset::{camera_model, sweep_library, write_dataset, Sequence, SynthFrame};
pub use metrics::{mean_std, mean_vertex_error, visible_fraction};
pub use scene::{preset, SceneScript, PRESETS};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] occtrack::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
