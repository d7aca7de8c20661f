//! Per-clip optimized state: the object field, hand shape/articulation, and
//! the per-frame pose and camera tracks, with the flattening that feeds the
//! optimizer and the tape bindings the losses consume.

use crate::error::HoiError;
use crate::geom::{axis_angle_to_mat, RigidTransform, V3};
use crate::scene::field::{FieldVars, ObjectField};
use crate::scene::hand::{HandProxy, BETA_DIM, THETA_DIM};
use diffcore::{ParamSet, Tape, Tensor, Var};

/// Pinhole intrinsics in normalized image units (principal point at the
/// image center is (0,0) with our pixel-to-camera convention).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraParams {
    pub focal: f64,
    pub px: f64,
    pub py: f64,
}

impl CameraParams {
    pub fn new(focal: f64) -> Self {
        CameraParams { focal, px: 0.0, py: 0.0 }
    }

    /// Full-perspective projection of a camera-frame point. Errors behind
    /// the near plane.
    pub fn project(&self, p: V3, near: f64) -> Result<([f64; 2], f64), HoiError> {
        if p[2] <= near {
            return Err(HoiError::Degenerate(format!(
                "projection of point at depth {:.6} behind near plane {near}",
                p[2]
            )));
        }
        Ok((
            [
                self.focal * p[0] / p[2] + self.px,
                self.focal * p[1] / p[2] + self.py,
            ],
            p[2],
        ))
    }
}

/// Per-frame rigid tracks and intrinsics.
///
/// `obj_from_hand[t]` maps hand-frame points into the object frame (the
/// object field is queried through it); `cam_from_hand[t]` maps hand-frame
/// points into the camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseTrack {
    pub obj_rot: Vec<V3>,
    pub obj_t: Vec<V3>,
    pub cam_rot: Vec<V3>,
    pub cam_t: Vec<V3>,
    pub cameras: Vec<CameraParams>,
}

impl PoseTrack {
    pub fn identity(frames: usize, focal: f64) -> Self {
        PoseTrack {
            obj_rot: vec![[0.0; 3]; frames],
            obj_t: vec![[0.0; 3]; frames],
            cam_rot: vec![[0.0; 3]; frames],
            cam_t: vec![[0.0; 3]; frames],
            cameras: vec![CameraParams::new(focal); frames],
        }
    }

    pub fn frames(&self) -> usize {
        self.obj_rot.len()
    }

    pub fn obj_from_hand(&self, t: usize) -> RigidTransform {
        RigidTransform::new(axis_angle_to_mat(self.obj_rot[t]), self.obj_t[t])
    }

    pub fn cam_from_hand(&self, t: usize) -> RigidTransform {
        RigidTransform::new(axis_angle_to_mat(self.cam_rot[t]), self.cam_t[t])
    }

    pub fn validate(&self) -> Result<(), HoiError> {
        let n = self.frames();
        if self.obj_t.len() != n
            || self.cam_rot.len() != n
            || self.cam_t.len() != n
            || self.cameras.len() != n
        {
            return Err(HoiError::Invalid("pose track length mismatch".into()));
        }
        Ok(())
    }
}

/// Everything optimized for one clip.
#[derive(Debug, Clone)]
pub struct SceneState {
    pub field: ObjectField,
    pub hand: HandProxy,
    pub beta: Tensor,
    /// Per-frame articulation `[45]`.
    pub thetas: Vec<Tensor>,
    pub poses: PoseTrack,
}

/// Tape bindings of a whole scene, aligned with [`SceneState::to_params`].
pub struct SceneVars {
    pub field: FieldVars,
    pub beta: Var,
    pub thetas: Vec<Var>,
    pub obj_rot: Vec<Var>,
    pub obj_t: Vec<Var>,
    pub cam_rot: Vec<Var>,
    pub cam_t: Vec<Var>,
    pub focal: Vec<Var>,
    pub principal: Vec<Var>,
}

impl SceneState {
    pub fn new(field: ObjectField, hand: HandProxy, frames: usize, focal: f64) -> Self {
        SceneState {
            field,
            hand,
            beta: Tensor::zeros(vec![BETA_DIM]),
            thetas: vec![Tensor::zeros(vec![THETA_DIM]); frames],
            poses: PoseTrack::identity(frames, focal),
        }
    }

    pub fn frames(&self) -> usize {
        self.thetas.len()
    }

    /// Flatten every optimized quantity into a named parameter set. Order
    /// is the binding contract for [`SceneState::bind`] and
    /// [`SceneState::update_from`].
    pub fn to_params(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        self.field.push_params(&mut ps);
        ps.push("hand.beta", self.beta.clone());
        for (t, th) in self.thetas.iter().enumerate() {
            ps.push(format!("hand.theta.{t}"), th.clone());
        }
        for t in 0..self.frames() {
            ps.push(format!("pose.obj_rot.{t}"), Tensor::from_vec(self.poses.obj_rot[t].to_vec()));
            ps.push(format!("pose.obj_t.{t}"), Tensor::from_vec(self.poses.obj_t[t].to_vec()));
            ps.push(format!("cam.rot.{t}"), Tensor::from_vec(self.poses.cam_rot[t].to_vec()));
            ps.push(format!("cam.t.{t}"), Tensor::from_vec(self.poses.cam_t[t].to_vec()));
            let c = self.poses.cameras[t];
            ps.push(format!("cam.f.{t}"), Tensor::from_vec(vec![c.focal]));
            ps.push(format!("cam.pp.{t}"), Tensor::from_vec(vec![c.px, c.py]));
        }
        ps
    }

    /// Copy parameters back from a set produced by [`SceneState::to_params`].
    pub fn update_from(&mut self, ps: &ParamSet) {
        let mut idx = self.field.update_from(ps, 0);
        self.beta = ps.tensors[idx].clone();
        idx += 1;
        for th in self.thetas.iter_mut() {
            *th = ps.tensors[idx].clone();
            idx += 1;
        }
        for t in 0..self.frames() {
            self.poses.obj_rot[t] = v3(&ps.tensors[idx]);
            self.poses.obj_t[t] = v3(&ps.tensors[idx + 1]);
            self.poses.cam_rot[t] = v3(&ps.tensors[idx + 2]);
            self.poses.cam_t[t] = v3(&ps.tensors[idx + 3]);
            self.poses.cameras[t].focal = ps.tensors[idx + 4].data()[0];
            self.poses.cameras[t].px = ps.tensors[idx + 5].data()[0];
            self.poses.cameras[t].py = ps.tensors[idx + 5].data()[1];
            idx += 6;
        }
    }

    /// Bind leaves (pushed in `to_params` order) into structured vars.
    pub fn bind(&self, leaves: &[Var]) -> SceneVars {
        let (field, mut idx) = self.field.vars_from_leaves(leaves, 0);
        let beta = leaves[idx];
        idx += 1;
        let frames = self.frames();
        let thetas = leaves[idx..idx + frames].to_vec();
        idx += frames;
        let mut obj_rot = Vec::with_capacity(frames);
        let mut obj_t = Vec::with_capacity(frames);
        let mut cam_rot = Vec::with_capacity(frames);
        let mut cam_t = Vec::with_capacity(frames);
        let mut focal = Vec::with_capacity(frames);
        let mut principal = Vec::with_capacity(frames);
        for _ in 0..frames {
            obj_rot.push(leaves[idx]);
            obj_t.push(leaves[idx + 1]);
            cam_rot.push(leaves[idx + 2]);
            cam_t.push(leaves[idx + 3]);
            focal.push(leaves[idx + 4]);
            principal.push(leaves[idx + 5]);
            idx += 6;
        }
        SceneVars {
            field,
            beta,
            thetas,
            obj_rot,
            obj_t,
            cam_rot,
            cam_t,
            focal,
            principal,
        }
    }

    /// Bind the whole scene onto a tape as leaves, returning both the raw
    /// leaf list (for gradient collection) and the structured view.
    pub fn leaves_and_vars(&self, tape: &mut Tape, ps: &ParamSet) -> (Vec<Var>, SceneVars) {
        let leaves = ps.leaves(tape);
        let vars = self.bind(&leaves);
        (leaves, vars)
    }
}

fn v3(t: &Tensor) -> V3 {
    [t.data()[0], t.data()[1], t.data()[2]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::hand::HandProxy;

    #[test]
    fn params_round_trip() {
        let field = ObjectField::new(1);
        let hand = HandProxy::default_proxy();
        let mut scene = SceneState::new(field, hand, 3, 1.0);
        scene.poses.cam_t[1] = [0.1, -0.2, 0.5];
        scene.poses.cameras[2].focal = 1.7;
        let ps = scene.to_params();
        let mut other = scene.clone();
        other.poses.cam_t[1] = [0.0; 3];
        other.poses.cameras[2].focal = 1.0;
        other.update_from(&ps);
        assert_eq!(other.poses.cam_t[1], [0.1, -0.2, 0.5]);
        assert_eq!(other.poses.cameras[2].focal, 1.7);
    }

    #[test]
    fn projection_basics() {
        let cam = CameraParams::new(1.0);
        let ((u, v), d) = cam.project([0.0, 0.0, 1.0], 1e-4).map(|(p, d)| ((p[0], p[1]), d)).unwrap();
        assert_eq!((u, v, d), (0.0, 0.0, 1.0));
        let cam2 = CameraParams::new(2.0);
        let ([u, _], _) = cam2.project([0.5, 0.0, 1.0], 1e-4).unwrap();
        assert!((u - 1.0).abs() < 1e-12);
        assert!(cam.project([0.0, 0.0, -1.0], 1e-4).is_err());
    }
}
