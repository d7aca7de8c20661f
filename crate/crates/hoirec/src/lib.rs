//! Per-clip reconstruction of a rigid hand-held object: a neural SDF scene
//! representation, differentiable volumetric + mesh rendering with soft
//! blending, a conditional geometry diffusion prior distilled into the
//! scene, and the evaluation metrics that score the result.

pub mod error;
pub mod geom;
pub mod render;
pub mod scene;

pub use error::HoiError;
