//! The scene representation: a time-persistent object SDF field, a
//! parametric articulated hand, per-frame relative poses, cameras and
//! intrinsics, and the frame-composition algebra tying them together.

pub mod analytic;
pub mod field;
pub mod hand;
pub mod pose;

pub use analytic::{AnalyticField, Shape};
pub use field::{init_sphere, BoundField, FieldEval, FieldVars, ObjectField, TransformedField};
pub use hand::{HandProxy, HandVars};
pub use pose::{CameraParams, PoseTrack, SceneState};
