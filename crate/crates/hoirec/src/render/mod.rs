//! Differentiable rendering: volumetric SDF rendering for the object, soft
//! rasterization for the hand, depth-aware soft blending into semantic
//! masks, and novel-view sampling.

pub mod blend;
pub mod image;
pub mod raster;
pub mod rays;
pub mod volume;

pub use blend::{blend, blend_scalar_reference, BlendConfig, Blended};
pub use image::{GeometryImage, HAND_CHANNELS, OBJ_CHANNELS};
pub use raster::{render_hand, RasterConfig, RasterMesh, RasterOut};
pub use rays::{
    midpoint_tvals, sample_novel_view, stratified_tvals, Camera, RayBatch, ViewSampler,
};
pub use volume::{laplace_cdf, render_object, DensityVars, RayVars, RenderOpts, RenderedObject};
