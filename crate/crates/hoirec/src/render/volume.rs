//! Volumetric SDF rendering: Laplace-CDF density, transmittance
//! accumulation along stratified samples, expected-depth and
//! opacity-weighted normal images. Everything stays on the tape, so masks,
//! depths and normals are differentiable in the field parameters and in
//! whatever the ray tensors were built from (poses, intrinsics).

use crate::error::HoiError;
use crate::geom::M3;
use crate::scene::field::FieldEval;
use diffcore::{CustomVjp, Tape, Tensor, Var};

/// Differentiable ray inputs. `origins`/`dirs` are `[P,3]` vars (constants
/// or pose-derived), `tvals` a `[P,S]` constant of sample depths along each
/// unit direction.
pub struct RayVars {
    pub origins: Var,
    pub dirs: Var,
    pub tvals: Tensor,
}

impl RayVars {
    pub fn from_batch(
        tape: &mut Tape,
        batch: &crate::render::rays::RayBatch,
        tvals: Tensor,
    ) -> Self {
        RayVars {
            origins: tape.constant(batch.origins_tensor()),
            dirs: tape.constant(batch.dirs_tensor()),
            tvals,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RenderOpts {
    /// Depth window for normalized depth (far maps to 0, near to 1).
    pub depth_range: (f64, f64),
    pub with_normals: bool,
    /// Rotation taking hand-frame normals into the camera frame.
    pub normal_rot: Option<M3>,
}

impl RenderOpts {
    pub fn new(depth_range: (f64, f64)) -> Self {
        RenderOpts { depth_range, with_normals: false, normal_rot: None }
    }

    pub fn with_normals(mut self, rot: M3) -> Self {
        self.with_normals = true;
        self.normal_rot = Some(rot);
        self
    }
}

/// Per-pixel outputs of the volumetric pass, all `[P]` (`normals` `[P,3]`).
pub struct RenderedObject {
    pub mask: Var,
    pub depth_raw: Var,
    pub depth_norm: Var,
    pub normals: Option<Var>,
}

/// Density scale pair on the tape: `sigma = alpha * Psi_beta(-sdf)`.
#[derive(Clone, Copy)]
pub struct DensityVars {
    pub alpha: Var,
    pub beta: Var,
}

impl DensityVars {
    /// Constant density parameters (ground-truth renders).
    pub fn constant(tape: &mut Tape, beta: f64) -> Self {
        DensityVars {
            alpha: tape.constant(Tensor::from_vec(vec![1.0 / beta])),
            beta: tape.constant(Tensor::from_vec(vec![beta])),
        }
    }
}

struct LaplaceCdfVjp;

impl CustomVjp for LaplaceCdfVjp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f64],
        grads: &mut [Option<&mut Vec<f64>>],
    ) {
        let t = inputs[0].data();
        let beta = inputs[1].data()[0];
        if let Some(buf) = grads[0].as_mut() {
            for i in 0..t.len() {
                // pdf of the Laplace distribution
                buf[i] += grad_out[i] * (-t[i].abs() / beta).exp() / (2.0 * beta);
            }
        }
        if let Some(buf) = grads[1].as_mut() {
            let mut acc = 0.0;
            for i in 0..t.len() {
                let s = if t[i] >= 0.0 { 1.0 } else { -1.0 };
                acc += grad_out[i] * (-s) * 0.5 * (-t[i].abs() / beta).exp() * t[i].abs()
                    / (beta * beta);
            }
            buf[0] += acc;
        }
    }
}

/// Laplace CDF `Psi_beta(t)` as a fused tape op (value and both partials
/// are continuous at t = 0).
pub fn laplace_cdf(tape: &mut Tape, t: Var, beta: Var) -> Result<Var, HoiError> {
    let tv = tape.value(t);
    let b = tape.value(beta).data()[0];
    if b <= 0.0 {
        return Err(HoiError::Invalid(format!("density beta must be positive, got {b}")));
    }
    let out: Vec<f64> = tv
        .data()
        .iter()
        .map(|&x| {
            if x <= 0.0 {
                0.5 * (x / b).exp()
            } else {
                1.0 - 0.5 * (-x / b).exp()
            }
        })
        .collect();
    let shape = tv.shape().to_vec();
    Ok(tape.custom(&[t, beta], Tensor::new(shape, out)?, Box::new(LaplaceCdfVjp))?)
}

/// Render an SDF field along a ray batch.
pub fn render_object<F: FieldEval>(
    tape: &mut Tape,
    field: &F,
    rays: &RayVars,
    density: DensityVars,
    opts: &RenderOpts,
) -> Result<RenderedObject, HoiError> {
    let shape = rays.tvals.shape();
    let (p, s) = (shape[0], shape[1]);
    if tape.value(rays.dirs).shape() != [p, 3] {
        return Err(HoiError::Invalid("ray dirs must be [P,3]".into()));
    }
    {
        let d = tape.value(rays.dirs).data();
        for r in 0..p {
            let n2 = d[3 * r] * d[3 * r] + d[3 * r + 1] * d[3 * r + 1] + d[3 * r + 2] * d[3 * r + 2];
            if !(n2 > 1e-12) {
                return Err(HoiError::Degenerate(format!("zero direction on ray {r}")));
            }
        }
    }
    let (near, far) = opts.depth_range;
    if far <= near {
        return Err(HoiError::Invalid("depth range must have far > near".into()));
    }

    // Sample points: each ray row repeated S times, advanced by tvals.
    let o_rep = tape.repeat_rows(rays.origins, s)?;
    let d_rep = tape.repeat_rows(rays.dirs, s)?;
    let tflat = tape.constant(
        rays.tvals
            .clone()
            .reshaped(vec![p * s])
            .expect("tvals reshape"),
    );
    let step = tape.mul_col(d_rep, tflat)?;
    let points = tape.add(o_rep, step)?;

    let (sdf, grad) = if opts.with_normals {
        let (sdf, grad) = field.eval_with_grad(tape, points)?;
        (sdf, Some(grad))
    } else {
        (field.eval(tape, points)?, None)
    };
    if !tape.value(sdf).is_finite() {
        return Err(HoiError::NonFinite("sdf along rays".into()));
    }

    // Density, opacity, transmittance.
    let neg_sdf = tape.neg(sdf);
    let psi = laplace_cdf(tape, neg_sdf, density.beta)?;
    let sigma = tape.scale_by(psi, density.alpha)?;
    let sigma = tape.reshape(sigma, vec![p, s])?;
    let delta = tape.constant(sample_spacings(&rays.tvals, far));
    let tau = tape.mul(sigma, delta)?;
    let cum = tape.cumsum_rows_exclusive(tau)?;
    let neg_cum = tape.neg(cum);
    let trans = tape.exp(neg_cum);
    let neg_tau = tape.neg(tau);
    let exp_neg_tau = tape.exp(neg_tau);
    let ones = tape.constant(Tensor::full(vec![p, s], 1.0));
    let opaq = tape.sub(ones, exp_neg_tau)?;
    let w = tape.mul(trans, opaq)?;

    // All-opaque near plane: every first sample saturating means the field
    // is solid at the near boundary.
    {
        let wv = tape.value(opaq).data();
        let mut min_first = f64::INFINITY;
        for r in 0..p {
            min_first = min_first.min(wv[r * s]);
        }
        if min_first > 0.999 {
            return Err(HoiError::Degenerate(
                "volume is opaque at the near plane on every ray".into(),
            ));
        }
    }

    let mask = tape.sum_rows(w)?;
    let tconst = tape.constant(rays.tvals.clone());
    let wt = tape.mul(w, tconst)?;
    let expected = tape.sum_rows(wt)?;
    // Background terminates at the far plane.
    let ones_p = tape.constant(Tensor::full(vec![p], 1.0));
    let bg = tape.sub(ones_p, mask)?;
    let bg_far = tape.mul_scalar(bg, far);
    let depth_raw = tape.add(expected, bg_far)?;

    // Normalized, mask-gated depth: m * (far - d) / (far - near).
    let neg_d = tape.mul_scalar(depth_raw, -1.0 / (far - near));
    let shifted = tape.add_scalar(neg_d, far / (far - near));
    let depth_norm = tape.mul(mask, shifted)?;

    let normals = match grad {
        None => None,
        Some(g) => {
            // Normalize per-sample gradients.
            let g2 = tape.square(g);
            let g2s = tape.sum_rows(g2)?;
            let gn = tape.sqrt(g2s);
            let gn = tape.add_scalar(gn, 1e-9);
            let ones_ps = tape.constant(Tensor::full(vec![p * s], 1.0));
            let inv = tape.div(ones_ps, gn)?;
            let unit = tape.mul_col(g, inv)?;
            // Opacity-weighted sum per pixel, one coordinate at a time.
            let wflat = tape.reshape(w, vec![p * s])?;
            let mut cols = Vec::with_capacity(3);
            for c in 0..3 {
                let mut sel = vec![0.0; 3];
                sel[c] = 1.0;
                let e = tape.constant(Tensor::new(vec![3, 1], sel)?);
                let comp = tape.matmul(unit, e)?;
                let comp = tape.reshape(comp, vec![p * s])?;
                let cw = tape.mul(comp, wflat)?;
                let cw = tape.reshape(cw, vec![p, s])?;
                cols.push(tape.sum_rows(cw)?);
            }
            let acc = tape.concat_cols(&cols)?;
            // Renormalize where the accumulated vector has support.
            let a2 = tape.square(acc);
            let a2s = tape.sum_rows(a2)?;
            let an = tape.sqrt(a2s);
            let an = tape.add_scalar(an, 1e-4);
            let onep = tape.constant(Tensor::full(vec![p], 1.0));
            let ainv = tape.div(onep, an)?;
            let n_hand = tape.mul_col(acc, ainv)?;
            let n = match opts.normal_rot {
                None => n_hand,
                Some(rot) => {
                    // Row vectors: n_cam = n_hand R^T per row -> matmul by
                    // R^T stored row-major, i.e. the transpose tensor.
                    let mut rt = vec![0.0; 9];
                    for r in 0..3 {
                        for c in 0..3 {
                            rt[r * 3 + c] = rot[c][r];
                        }
                    }
                    let rtv = tape.constant(Tensor::new(vec![3, 3], rt)?);
                    tape.matmul(n_hand, rtv)?
                }
            };
            Some(n)
        }
    };

    Ok(RenderedObject { mask, depth_raw, depth_norm, normals })
}

/// Forward differences of the sample depths; the last sample extends to the
/// far plane so the final bin has nonzero measure.
fn sample_spacings(tvals: &Tensor, far: f64) -> Tensor {
    let shape = tvals.shape();
    let (p, s) = (shape[0], shape[1]);
    let t = tvals.data();
    let mut d = vec![0.0; p * s];
    for r in 0..p {
        for j in 0..s {
            d[r * s + j] = if j + 1 < s {
                t[r * s + j + 1] - t[r * s + j]
            } else {
                (far - t[r * s + j]).max(1e-6)
            };
        }
    }
    Tensor::new(vec![p, s], d).expect("spacing shape")
}
