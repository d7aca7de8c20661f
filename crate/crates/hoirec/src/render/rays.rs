//! Cameras, pixel grids, ray batches, and the novel-view sampler.
//!
//! Image coordinates are normalized: a pixel (x, y) in a WxH image maps to
//! (u, v) = ((2x+1)/W - 1, (2y+1)/H - 1), so u and v run over [-1, 1] with
//! +u right and +v down. The pinhole projection is u = f X/Z + px,
//! v = f Y/Z + py for camera-frame points (X right, Y down, Z forward).

use crate::geom::{self, RigidTransform, V3};
use crate::scene::pose::CameraParams;
use diffcore::Tensor;
use rand::Rng;

/// A posed pinhole camera over a WxH pixel grid.
#[derive(Debug, Clone)]
pub struct Camera {
    /// Maps hand-frame (scene) points into the camera frame.
    pub cam_from_hand: RigidTransform,
    pub intrinsics: CameraParams,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Camera positioned at `center` looking toward `target`, `up` fixing
    /// the roll (+v points away from `up` since +v is image-down).
    pub fn look_at(
        center: V3,
        target: V3,
        up: V3,
        intrinsics: CameraParams,
        width: usize,
        height: usize,
    ) -> Self {
        let z = geom::normalize(geom::sub(target, center));
        let x = geom::normalize(geom::cross(up, z));
        let x = if geom::norm(x) < 1e-9 { [1.0, 0.0, 0.0] } else { x };
        let y = geom::cross(z, x);
        let rot = [x, y, z]; // rows: camera axes in the scene frame
        let t = geom::scale(geom::mat_vec(&rot, center), -1.0);
        Camera {
            cam_from_hand: RigidTransform::new(rot, t),
            intrinsics,
            width,
            height,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Normalized image coordinates of a pixel center.
    pub fn pixel_uv(&self, x: usize, y: usize) -> [f64; 2] {
        [
            (2.0 * x as f64 + 1.0) / self.width as f64 - 1.0,
            (2.0 * y as f64 + 1.0) / self.height as f64 - 1.0,
        ]
    }

    /// Camera center expressed in the hand frame.
    pub fn center(&self) -> V3 {
        self.cam_from_hand.inverse().t
    }

    /// Unit ray through a pixel, in the hand frame.
    pub fn ray(&self, x: usize, y: usize) -> (V3, V3) {
        let [u, v] = self.pixel_uv(x, y);
        let k = &self.intrinsics;
        let dir_cam = geom::normalize([(u - k.px) / k.focal, (v - k.py) / k.focal, 1.0]);
        let inv = self.cam_from_hand.inverse();
        (inv.t, inv.apply_vec(dir_cam))
    }

    /// Rays for every pixel in row-major order.
    pub fn all_rays(&self) -> RayBatch {
        let pixels: Vec<usize> = (0..self.pixel_count()).collect();
        self.rays_for_pixels(&pixels)
    }

    pub fn rays_for_pixels(&self, pixels: &[usize]) -> RayBatch {
        let mut origins = Vec::with_capacity(pixels.len());
        let mut dirs = Vec::with_capacity(pixels.len());
        for p in pixels {
            let (o, d) = self.ray(p % self.width, p / self.width);
            origins.push(o);
            dirs.push(d);
        }
        RayBatch { origins, dirs, pixels: pixels.to_vec() }
    }
}

/// Plain (non-differentiable) rays: origins, unit directions, and the
/// pixel indices they came from.
#[derive(Debug, Clone)]
pub struct RayBatch {
    pub origins: Vec<V3>,
    pub dirs: Vec<V3>,
    pub pixels: Vec<usize>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn origins_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.len(), 3],
            self.origins.iter().flatten().copied().collect(),
        )
        .expect("ray origins shape")
    }

    pub fn dirs_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), 3], self.dirs.iter().flatten().copied().collect())
            .expect("ray dirs shape")
    }
}

/// Stratified per-ray sample depths: sample j of any ray lies uniformly
/// within bin j of [near, far]. Strictly increasing per ray.
pub fn stratified_tvals(
    n_rays: usize,
    samples: usize,
    near: f64,
    far: f64,
    rng: &mut impl Rng,
) -> Tensor {
    assert!(far > near && samples > 0);
    let bin = (far - near) / samples as f64;
    let mut data = Vec::with_capacity(n_rays * samples);
    for _ in 0..n_rays {
        for j in 0..samples {
            data.push(near + (j as f64 + rng.random::<f64>()) * bin);
        }
    }
    Tensor::new(vec![n_rays, samples], data).expect("tvals shape")
}

/// Midpoint (deterministic) sample depths, for oracle renders.
pub fn midpoint_tvals(n_rays: usize, samples: usize, near: f64, far: f64) -> Tensor {
    let bin = (far - near) / samples as f64;
    let mut data = Vec::with_capacity(n_rays * samples);
    for _ in 0..n_rays {
        for j in 0..samples {
            data.push(near + (j as f64 + 0.5) * bin);
        }
    }
    Tensor::new(vec![n_rays, samples], data).expect("tvals shape")
}

/// Novel-view distribution: rotation uniform on SO(3), camera at a uniform
/// random distance looking at `lookat`, fixed focal and resolution.
#[derive(Debug, Clone)]
pub struct ViewSampler {
    pub dist_range: (f64, f64),
    pub lookat: V3,
    pub focal: f64,
    pub resolution: usize,
}

impl Default for ViewSampler {
    fn default() -> Self {
        ViewSampler {
            dist_range: (0.30, 0.45),
            lookat: [0.0, 0.06, 0.02],
            focal: 1.0,
            resolution: 64,
        }
    }
}

impl ViewSampler {
    pub fn sample(&self, rng: &mut impl Rng) -> Camera {
        sample_novel_view(self, rng)
    }
}

pub fn sample_novel_view(cfg: &ViewSampler, rng: &mut impl Rng) -> Camera {
    let rot = geom::sample_uniform_rotation(rng);
    let dist = cfg.dist_range.0 + rng.random::<f64>() * (cfg.dist_range.1 - cfg.dist_range.0);
    // Camera center sits `dist` behind the lookat point along the camera's
    // back-projected z axis; translation follows from t = -R c.
    let t = geom::add(geom::scale(geom::mat_vec(&rot, cfg.lookat), -1.0), [0.0, 0.0, dist]);
    Camera {
        cam_from_hand: RigidTransform::new(rot, t),
        intrinsics: CameraParams::new(cfg.focal),
        width: cfg.resolution,
        height: cfg.resolution,
    }
}
