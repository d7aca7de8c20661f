//! Closed-form signed-distance shapes: ground-truth objects for synthetic
//! scenes and oracles for the renderer and mesh-extraction tests.
//!
//! Boolean combinations are the usual min/max bounds — not exact distances
//! everywhere, but sign-correct with the right zero set, which is all the
//! renderer, sampler and marching cubes need.

use crate::error::HoiError;
use crate::geom::{self, RigidTransform, V3};
use crate::scene::field::FieldEval;
use diffcore::{CustomVjp, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Shape {
    Sphere { radius: f64 },
    /// Axis-aligned along +y, centered; `half_h` excludes the caps.
    Capsule { half_h: f64, radius: f64 },
    Cylinder { half_h: f64, radius: f64 },
    /// Ring around the y axis in the xz plane.
    Torus { major: f64, minor: f64 },
    Box { half: [f64; 3] },
    RoundBox { half: [f64; 3], round: f64 },
    /// Open hemisphere shell (a bowl): sphere shell of thickness `thick`
    /// cut by the plane y < `lip` (lip measured from center).
    BowlShell { radius: f64, thick: f64, lip: f64 },
    Union(Vec<Shape>),
    Intersection(Vec<Shape>),
    /// First minus the rest.
    Difference(Vec<Shape>),
    SmoothUnion { k: f64, shapes: Vec<Shape> },
    Translated { offset: [f64; 3], shape: Box<Shape> },
    /// Axis-angle rotation applied to the shape.
    Rotated { axis_angle: [f64; 3], shape: Box<Shape> },
    ScaledUniform { factor: f64, shape: Box<Shape> },
}

impl Shape {
    pub fn sdf(&self, p: V3) -> f64 {
        match self {
            Shape::Sphere { radius } => geom::norm(p) - radius,
            Shape::Capsule { half_h, radius } => {
                let y = p[1].clamp(-half_h, *half_h);
                geom::norm([p[0], p[1] - y, p[2]]) - radius
            }
            Shape::Cylinder { half_h, radius } => {
                let dr = (p[0] * p[0] + p[2] * p[2]).sqrt() - radius;
                let dy = p[1].abs() - half_h;
                let outside = (dr.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
                outside + dr.max(dy).min(0.0)
            }
            Shape::Torus { major, minor } => {
                let q = (p[0] * p[0] + p[2] * p[2]).sqrt() - major;
                (q * q + p[1] * p[1]).sqrt() - minor
            }
            Shape::Box { half } => box_sdf(p, *half),
            Shape::RoundBox { half, round } => box_sdf(p, *half) - round,
            Shape::BowlShell { radius, thick, lip } => {
                let shell = (geom::norm(p) - radius).abs() - thick;
                let cut = p[1] - lip; // keep y <= lip
                shell.max(cut)
            }
            Shape::Union(shapes) => shapes
                .iter()
                .map(|s| s.sdf(p))
                .fold(f64::INFINITY, f64::min),
            Shape::Intersection(shapes) => shapes
                .iter()
                .map(|s| s.sdf(p))
                .fold(f64::NEG_INFINITY, f64::max),
            Shape::Difference(shapes) => {
                let mut d = shapes[0].sdf(p);
                for s in &shapes[1..] {
                    d = d.max(-s.sdf(p));
                }
                d
            }
            Shape::SmoothUnion { k, shapes } => {
                let mut d = f64::INFINITY;
                for s in shapes {
                    d = smooth_min(d, s.sdf(p), *k);
                }
                d
            }
            Shape::Translated { offset, shape } => shape.sdf(geom::sub(p, *offset)),
            Shape::Rotated { axis_angle, shape } => {
                let r = geom::axis_angle_to_mat(*axis_angle);
                shape.sdf(geom::mat_vec(&geom::mat_transpose(&r), p))
            }
            Shape::ScaledUniform { factor, shape } => {
                shape.sdf(geom::scale(p, 1.0 / factor)) * factor
            }
        }
    }

    /// Central-difference spatial gradient; the shapes are exact enough
    /// that this serves as the normal oracle.
    pub fn grad(&self, p: V3, eps: f64) -> V3 {
        let mut g = [0.0; 3];
        for c in 0..3 {
            let mut pp = p;
            let mut pm = p;
            pp[c] += eps;
            pm[c] -= eps;
            g[c] = (self.sdf(pp) - self.sdf(pm)) / (2.0 * eps);
        }
        g
    }

    /// Loose world-space radius bound used to pick grids and camera ranges.
    pub fn bounding_radius(&self) -> f64 {
        match self {
            Shape::Sphere { radius } => *radius,
            Shape::Capsule { half_h, radius } => half_h + radius,
            Shape::Cylinder { half_h, radius } => (half_h * half_h + radius * radius).sqrt(),
            Shape::Torus { major, minor } => major + minor,
            Shape::Box { half } => geom::norm(*half),
            Shape::RoundBox { half, round } => geom::norm(*half) + round,
            Shape::BowlShell { radius, thick, .. } => radius + thick,
            Shape::Union(s) | Shape::Intersection(s) | Shape::Difference(s) => s
                .iter()
                .map(|x| x.bounding_radius())
                .fold(0.0, f64::max),
            Shape::SmoothUnion { shapes, .. } => shapes
                .iter()
                .map(|x| x.bounding_radius())
                .fold(0.0, f64::max),
            Shape::Translated { offset, shape } => shape.bounding_radius() + geom::norm(*offset),
            Shape::Rotated { shape, .. } => shape.bounding_radius(),
            Shape::ScaledUniform { factor, shape } => shape.bounding_radius() * factor,
        }
    }
}

fn box_sdf(p: V3, half: V3) -> f64 {
    let q = [
        p[0].abs() - half[0],
        p[1].abs() - half[1],
        p[2].abs() - half[2],
    ];
    let outside = geom::norm([q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)]);
    outside + q[0].max(q[1]).max(q[2]).min(0.0)
}

fn smooth_min(a: f64, b: f64, k: f64) -> f64 {
    if k <= 0.0 {
        return a.min(b);
    }
    let h = (0.5 + 0.5 * (b - a) / k).clamp(0.0, 1.0);
    b * (1.0 - h) + a * h - k * h * (1.0 - h)
}

/// A [`Shape`] placed in some frame, usable wherever the renderer expects a
/// field. Gradients with respect to the query points flow through a
/// finite-difference vjp; there are no shape parameters to optimize.
#[derive(Debug, Clone)]
pub struct AnalyticField {
    pub shape: Shape,
    /// Maps query-frame points into the shape's own frame.
    pub to_shape: RigidTransform,
}

impl AnalyticField {
    pub fn new(shape: Shape) -> Self {
        AnalyticField { shape, to_shape: RigidTransform::identity() }
    }

    pub fn with_transform(shape: Shape, to_shape: RigidTransform) -> Self {
        AnalyticField { shape, to_shape }
    }

    fn values(&self, pts: &[f64]) -> Vec<f64> {
        pts.chunks(3)
            .map(|c| self.shape.sdf(self.to_shape.apply([c[0], c[1], c[2]])))
            .collect()
    }

    fn gradients(&self, pts: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(pts.len());
        for c in pts.chunks(3) {
            let local = self.to_shape.apply([c[0], c[1], c[2]]);
            let g = self.shape.grad(local, 1e-6);
            // Chain through the rigid map: d sdf/dp = R^T g.
            let gq = geom::mat_vec(&geom::mat_transpose(&self.to_shape.rot), g);
            out.extend_from_slice(&gq);
        }
        out
    }
}

struct SdfVjp {
    grads: Vec<f64>,
}

impl CustomVjp for SdfVjp {
    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f64],
        grads: &mut [Option<&mut Vec<f64>>],
    ) {
        if let Some(buf) = grads[0].as_mut() {
            for (i, g) in grad_out.iter().enumerate() {
                buf[3 * i] += g * self.grads[3 * i];
                buf[3 * i + 1] += g * self.grads[3 * i + 1];
                buf[3 * i + 2] += g * self.grads[3 * i + 2];
            }
        }
    }
}

impl FieldEval for AnalyticField {
    fn eval(&self, tape: &mut Tape, points: Var) -> Result<Var, HoiError> {
        let pts = tape.value(points).data().to_vec();
        let n = pts.len() / 3;
        let vals = self.values(&pts);
        let grads = self.gradients(&pts);
        let out = Tensor::new(vec![n], vals)?;
        Ok(tape.custom(&[points], out, Box::new(SdfVjp { grads }))?)
    }

    fn eval_with_grad(&self, tape: &mut Tape, points: Var) -> Result<(Var, Var), HoiError> {
        let sdf = self.eval(tape, points)?;
        let pts = tape.value(points).data().to_vec();
        let n = pts.len() / 3;
        let grads = self.gradients(&pts);
        // Spatial gradients treated as constants: good enough for ground
        // truth rendering, where nothing differentiates through normals.
        let g = tape.constant(Tensor::new(vec![n, 3], grads)?);
        Ok((sdf, g))
    }
}
