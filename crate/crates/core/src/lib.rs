//! Occlusion-robust tracking of deformable objects (rope, cloth) from depth
//! and mask frames.
//!
//! A fixed-topology vertex/edge model is registered to each frame's point
//! cloud by a Gaussian-mixture EM whose centroids move through a smooth
//! displacement field, regularized toward the template's locally-linear
//! structure. Centroid priors come from free-space reasoning on the depth
//! image. The EM result is projected onto the set of states whose edges
//! stretch at most `lambda_stretch` times their template length, optionally
//! with pinned vertices. Frames whose result puts vertices in observed free
//! space trigger a retry from the most similar previously tracked states.
//!
//! Module map:
//! - [`types`]: model, camera, frame, state, correspondence and parameter records
//! - [`image`]: depth/mask to point cloud, distance transform, projection
//! - [`gmm`]: visibility prior, E-step, M-step, variance update, EM loop
//! - [`projection`]: stretch-limited, pin-constrained projection
//! - [`recovery`]: free-space energy, shape descriptors, descriptor library
//! - [`tracker`]: per-frame tracking with failure recovery
//! - [`io`]: dataset files on disk

pub mod error;
pub mod gmm;
pub mod image;
pub mod io;
pub mod projection;
pub mod recovery;
pub mod tracker;
pub mod types;

pub use error::{Error, Result};
pub use types::*;
