//! Multi-view visual-hull carving, Gaussian splat rendering with per-frame
//! refinement, and rotation-invariant spherical-harmonic pose embeddings.

pub mod camera;
pub mod carve;
pub mod dataset;
pub mod embed;
pub mod imaging;
pub mod linalg;
pub mod metrics;
pub mod poseframe;
pub mod refine;
pub mod splat;
pub mod synth;
