//! The object's signed-distance field: a positional-encoded MLP with four
//! 64-wide softplus blocks, its spatial-gradient evaluation (built as a
//! forward-mode graph so reverse AD reaches the weights), and the sphere
//! initialization fit.

use crate::error::HoiError;
use crate::geom::transform_points_var;
use diffcore::{AdamConfig, AdamState, GradAccum, ParamSet, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Frequencies in the positional encoding.
pub const ENC_FREQS: usize = 6;
/// Per-coordinate encoding width: raw value + sin/cos per frequency.
pub const ENC_BLOCK: usize = 1 + 2 * ENC_FREQS;
/// Full encoding width for a 3D point.
pub const ENC_DIM: usize = 3 * ENC_BLOCK;
/// Hidden width of each MLP block.
pub const HIDDEN: usize = 64;
/// Number of hidden blocks (linear + softplus).
pub const BLOCKS: usize = 4;

/// Anything the volumetric renderer can query for signed distances.
pub trait FieldEval {
    fn eval(&self, tape: &mut Tape, points: Var) -> Result<Var, HoiError>;

    /// SDF values plus spatial gradients `[N,3]` (per meter).
    fn eval_with_grad(&self, tape: &mut Tape, points: Var) -> Result<(Var, Var), HoiError>;
}

/// Tape handles for one binding of the field parameters.
#[derive(Clone)]
pub struct FieldVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    pub log_beta: Var,
    coord_scale: f64,
}

impl FieldVars {
    /// Density-transform scale pair (alpha = 1/beta) on the tape.
    pub fn density(&self, tape: &mut Tape) -> Result<(Var, Var), HoiError> {
        let beta = tape.exp(self.log_beta);
        let neg = tape.neg(self.log_beta);
        let alpha = tape.exp(neg);
        Ok((alpha, beta))
    }
}

/// MLP-backed SDF over the object frame.
///
/// Coordinates are normalized by `coord_scale` before encoding; outputs are
/// in meters. `log_beta` is the learnable scale of the density transform.
#[derive(Debug, Clone)]
pub struct ObjectField {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub log_beta: Tensor,
    pub coord_scale: f64,
}

impl ObjectField {
    /// Random small initialization with a radial bias on the raw-coordinate
    /// rows, so the net starts close to a centered distance field.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let dims = Self::layer_dims();
        for (li, (fan_in, fan_out)) in dims.iter().enumerate() {
            let std = (2.0 / *fan_in as f64).sqrt();
            let mut w = vec![0.0; fan_in * fan_out];
            for (idx, v) in w.iter_mut().enumerate() {
                let row = idx / fan_out;
                let mut s = std;
                if li == 0 {
                    // Damp the oscillatory encoding rows at start; raw
                    // coordinate rows (block offsets 0) keep full scale.
                    let in_block = row % ENC_BLOCK;
                    if in_block != 0 {
                        s *= 0.05;
                    }
                }
                *v = normal(&mut rng) * s;
            }
            weights.push(Tensor::new(vec![*fan_in, *fan_out], w).expect("shape"));
            biases.push(Tensor::zeros(vec![*fan_out]));
        }
        ObjectField {
            weights,
            biases,
            // beta ~ 0.02 m: densities ramp over a couple of centimeters.
            log_beta: Tensor::scalar((0.02f64).ln()),
            coord_scale: 0.25,
        }
    }

    fn layer_dims() -> Vec<(usize, usize)> {
        let mut dims = vec![(ENC_DIM, HIDDEN)];
        for _ in 1..BLOCKS {
            dims.push((HIDDEN, HIDDEN));
        }
        dims.push((HIDDEN, 1));
        dims
    }

    /// Radial construction: the net starts out approximating `|x|` before
    /// any fitting. Each hidden unit ramps along a random direction
    /// (`softplus ~ relu`, and averaging relu over uniform directions gives
    /// `|x|/4`); later blocks start near identity, the output layer
    /// averages the ramps back to meters.
    pub fn geometric(seed: u64) -> Self {
        let mut field = Self::new(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
        let sharp = 20.0;
        let cs = field.coord_scale;

        let w0 = field.weights[0].data_mut();
        for v in w0.iter_mut() {
            *v = 0.0;
        }
        for i in 0..HIDDEN {
            let d = crate::geom::normalize([normal(&mut rng), normal(&mut rng), normal(&mut rng)]);
            for c in 0..3 {
                // Raw-coordinate feature of coordinate c sits at encoding
                // row c * ENC_BLOCK.
                w0[(c * ENC_BLOCK) * HIDDEN + i] = sharp * d[c];
            }
        }
        for l in 1..BLOCKS {
            let w = field.weights[l].data_mut();
            for (idx, v) in w.iter_mut().enumerate() {
                let (r, c) = (idx / HIDDEN, idx % HIDDEN);
                *v = if r == c { 1.0 } else { 0.0 } + normal(&mut rng) * 0.01;
            }
        }
        let wout = field.weights[BLOCKS].data_mut();
        for v in wout.iter_mut() {
            *v = 4.0 * cs / (HIDDEN as f64 * sharp);
        }
        field
    }

    /// One-shot affine correction of the output layer against probe
    /// targets: solves `phi = alpha * gt + beta` in closed form and rescales
    /// the last layer so `phi ~ gt`.
    fn calibrate_affine(&mut self, probes: &[[f64; 3]], targets: &[f64]) -> Result<(), HoiError> {
        let vals = self.query(probes)?;
        let n = vals.len() as f64;
        let mean_v = vals.iter().sum::<f64>() / n;
        let mean_t = targets.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut var = 0.0;
        for (v, t) in vals.iter().zip(targets.iter()) {
            cov += (t - mean_t) * (v - mean_v);
            var += (t - mean_t) * (t - mean_t);
        }
        if var < 1e-12 {
            return Ok(());
        }
        let alpha = cov / var;
        if alpha.abs() < 1e-6 {
            return Ok(());
        }
        let beta = mean_v - alpha * mean_t;
        for v in self.weights[BLOCKS].data_mut().iter_mut() {
            *v /= alpha;
        }
        for v in self.biases[BLOCKS].data_mut().iter_mut() {
            *v = (*v - beta) / alpha;
        }
        Ok(())
    }

    /// Bind parameters onto a tape. `trainable` leaves accumulate
    /// gradients; constants do not.
    pub fn vars(&self, tape: &mut Tape, trainable: bool) -> FieldVars {
        let mut bind = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        FieldVars {
            weights: self.weights.iter().map(&mut bind).collect(),
            biases: self.biases.iter().map(&mut bind).collect(),
            log_beta: bind(&self.log_beta),
            coord_scale: self.coord_scale,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.numel()).sum::<usize>()
            + self.biases.iter().map(|b| b.numel()).sum::<usize>()
            + 1
    }

    /// Append all parameters to a set; order matches [`ObjectField::update_from`].
    pub fn push_params(&self, ps: &mut ParamSet) {
        for (i, w) in self.weights.iter().enumerate() {
            ps.push(format!("field.w{i}"), w.clone());
        }
        for (i, b) in self.biases.iter().enumerate() {
            ps.push(format!("field.b{i}"), b.clone());
        }
        ps.push("field.log_beta", self.log_beta.clone());
    }

    /// Read parameters back out of a set beginning at `base`; returns the
    /// index one past the field's block.
    pub fn update_from(&mut self, ps: &ParamSet, base: usize) -> usize {
        let mut idx = base;
        for w in self.weights.iter_mut() {
            *w = ps.tensors[idx].clone();
            idx += 1;
        }
        for b in self.biases.iter_mut() {
            *b = ps.tensors[idx].clone();
            idx += 1;
        }
        self.log_beta = ps.tensors[idx].clone();
        idx + 1
    }

    /// Vars for parameters already pushed as leaves in `push_params` order.
    pub fn vars_from_leaves(&self, leaves: &[Var], base: usize) -> (FieldVars, usize) {
        let n = self.weights.len();
        let vars = FieldVars {
            weights: leaves[base..base + n].to_vec(),
            biases: leaves[base + n..base + 2 * n].to_vec(),
            log_beta: leaves[base + 2 * n],
            coord_scale: self.coord_scale,
        };
        (vars, base + 2 * n + 1)
    }

    /// Positional encoding grouped per coordinate:
    /// `[x, sin(w_k x), cos(w_k x), ..., y..., z...]`, x normalized.
    fn encode(&self, tape: &mut Tape, points: Var) -> Result<(Var, Vec<Var>), HoiError> {
        let inv = 1.0 / self.coord_scale;
        let xn = tape.mul_scalar(points, inv);
        let mut parts = Vec::with_capacity(ENC_DIM);
        let mut cols = Vec::with_capacity(3);
        for c in 0..3 {
            let mut sel = vec![0.0; 3];
            sel[c] = 1.0;
            let e = tape.constant(Tensor::new(vec![3, 1], sel).expect("shape"));
            let col = tape.matmul(xn, e)?;
            cols.push(col);
            parts.push(col);
            for k in 0..ENC_FREQS {
                let w = (1u64 << k) as f64 * std::f64::consts::PI;
                let scaled = tape.mul_scalar(col, w);
                parts.push(tape.sin(scaled));
                parts.push(tape.cos(scaled));
            }
        }
        Ok((tape.concat_cols(&parts)?, cols))
    }

    /// Jacobian block of the encoding for coordinate `c`: `[N, ENC_BLOCK]`
    /// with derivatives taken per meter.
    fn encode_jacobian(
        &self,
        tape: &mut Tape,
        col: Var,
        n_points: usize,
    ) -> Result<Var, HoiError> {
        let inv = 1.0 / self.coord_scale;
        let ones = tape.constant(Tensor::full(vec![n_points, 1], inv));
        let mut parts = Vec::with_capacity(ENC_BLOCK);
        parts.push(ones);
        for k in 0..ENC_FREQS {
            let w = (1u64 << k) as f64 * std::f64::consts::PI;
            let scaled = tape.mul_scalar(col, w);
            let c = tape.cos(scaled);
            let s = tape.sin(scaled);
            parts.push(tape.mul_scalar(c, w * inv));
            parts.push(tape.mul_scalar(s, -w * inv));
        }
        Ok(tape.concat_cols(&parts)?)
    }

    fn forward(
        &self,
        tape: &mut Tape,
        vars: &FieldVars,
        enc: Var,
    ) -> Result<(Var, Vec<Var>, Vec<Var>), HoiError> {
        let mut h = enc;
        let mut pre = Vec::with_capacity(BLOCKS);
        let mut act = Vec::with_capacity(BLOCKS);
        for l in 0..BLOCKS {
            let z = tape.matmul(h, vars.weights[l])?;
            let z = tape.add_row(z, vars.biases[l])?;
            pre.push(z);
            h = tape.softplus(z);
            act.push(h);
        }
        let out = tape.matmul(h, vars.weights[BLOCKS])?;
        let out = tape.add_row(out, vars.biases[BLOCKS])?;
        Ok((out, pre, act))
    }

    /// SDF values `[N]` for points `[N,3]`.
    pub fn eval(&self, tape: &mut Tape, vars: &FieldVars, points: Var) -> Result<Var, HoiError> {
        let (enc, _) = self.encode(tape, points)?;
        let (out, _, _) = self.forward(tape, vars, enc)?;
        Ok(tape.reshape(out, vec![n_rows(tape, out)])?)
    }

    /// SDF values `[N]` and spatial gradients `[N,3]`, both tape-connected
    /// to the weights. The gradient is an explicit forward-mode
    /// differentiation of the network, one direction per coordinate.
    pub fn eval_with_grad(
        &self,
        tape: &mut Tape,
        vars: &FieldVars,
        points: Var,
    ) -> Result<(Var, Var), HoiError> {
        let n = tape.value(points).shape()[0];
        let (enc, cols) = self.encode(tape, points)?;
        let (out, pre, _) = self.forward(tape, vars, enc)?;
        // softplus' shared by all three directions
        let sig: Vec<Var> = pre.iter().map(|z| tape.sigmoid(*z)).collect();

        let mut grad_cols = Vec::with_capacity(3);
        for c in 0..3 {
            let denc = self.encode_jacobian(tape, cols[c], n)?;
            // First layer uses only the rows of W0 for this coordinate block.
            let w0 = vars.weights[0];
            let w0c = tape.slice(w0, c * ENC_BLOCK * HIDDEN, ENC_BLOCK * HIDDEN)?;
            let w0c = tape.reshape(w0c, vec![ENC_BLOCK, HIDDEN])?;
            let mut dh = tape.matmul(denc, w0c)?;
            dh = tape.mul(dh, sig[0])?;
            for l in 1..BLOCKS {
                let dz = tape.matmul(dh, vars.weights[l])?;
                dh = tape.mul(dz, sig[l])?;
            }
            let dphi = tape.matmul(dh, vars.weights[BLOCKS])?;
            grad_cols.push(dphi);
        }
        let grad = tape.concat_cols(&grad_cols)?;
        let sdf = tape.reshape(out, vec![n])?;
        Ok((sdf, grad))
    }

    /// Plain query helper: SDF values for points, no gradients kept.
    pub fn query(&self, points: &[[f64; 3]]) -> Result<Vec<f64>, HoiError> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(HoiError::NonFinite("sdf query points".into()));
        }
        let mut tape = Tape::new();
        let vars = self.vars(&mut tape, false);
        let flat: Vec<f64> = points.iter().flatten().copied().collect();
        let p = tape.constant(Tensor::new(vec![points.len(), 3], flat)?);
        let out = self.eval(&mut tape, &vars, p)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Plain query with spatial gradients.
    pub fn query_grad(&self, points: &[[f64; 3]]) -> Result<(Vec<f64>, Vec<[f64; 3]>), HoiError> {
        let mut tape = Tape::new();
        let vars = self.vars(&mut tape, false);
        let flat: Vec<f64> = points.iter().flatten().copied().collect();
        let p = tape.constant(Tensor::new(vec![points.len(), 3], flat)?);
        let (sdf, grad) = self.eval_with_grad(&mut tape, &vars, p)?;
        let g = tape
            .value(grad)
            .data()
            .chunks(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        Ok((tape.value(sdf).data().to_vec(), g))
    }

    /// Fit the field to the analytic sphere `|X| - radius` by short
    /// regression with an Eikonal term. Errors if the mean absolute
    /// residual stays above `tolerance` (meters).
    pub fn fit_sphere(
        &mut self,
        radius: f64,
        steps: usize,
        tolerance: f64,
        seed: u64,
    ) -> Result<f64, HoiError> {
        self.fit_sphere_lr(radius, steps, tolerance, seed, 5e-3)
    }

    #[doc(hidden)]
    pub fn fit_sphere_probe(&mut self, radius: f64, steps: usize, lr: f64, seed: u64) -> f64 {
        match self.fit_sphere_lr(radius, steps, f64::INFINITY, seed, lr) {
            Ok(r) => r,
            Err(_) => f64::NAN,
        }
    }

    fn fit_sphere_lr(
        &mut self,
        radius: f64,
        steps: usize,
        tolerance: f64,
        seed: u64,
        lr: f64,
    ) -> Result<f64, HoiError> {
        if radius <= 0.0 {
            return Err(HoiError::Invalid("sphere radius must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5df2);
        let box_half = 2.0 * radius;

        // Affine pre-calibration removes the softplus smoothing offset and
        // any ramp-scale error before gradient fitting starts.
        self.biases[BLOCKS].data_mut()[0] = -radius;
        let probes: Vec<[f64; 3]> = (0..256)
            .map(|_| {
                [
                    (rng.random::<f64>() - 0.5) * 2.0 * box_half,
                    (rng.random::<f64>() - 0.5) * 2.0 * box_half,
                    (rng.random::<f64>() - 0.5) * 2.0 * box_half,
                ]
            })
            .collect();
        let targets: Vec<f64> = probes.iter().map(|p| crate::geom::norm(*p) - radius).collect();
        self.calibrate_affine(&probes, &targets)?;

        let mut params = ParamSet::new();
        self.push_params(&mut params);
        let cfg = AdamConfig { lr, lr_decay: AdamConfig::decay_over(steps, 0.05), ..Default::default() };
        let mut adam = AdamState::new(cfg, &params);

        for _ in 0..steps {
            let batch = 1024;
            let mut pts = Vec::with_capacity(batch * 3);
            let mut target = Vec::with_capacity(batch);
            for i in 0..batch {
                // Mix of box-uniform, near-surface, and deep-interior
                // samples; the interior share keeps the cone apex at the
                // center from staying rounded.
                let p = match i % 8 {
                    0 | 2 | 4 | 6 => [
                        (rng.random::<f64>() - 0.5) * 2.0 * box_half,
                        (rng.random::<f64>() - 0.5) * 2.0 * box_half,
                        (rng.random::<f64>() - 0.5) * 2.0 * box_half,
                    ],
                    1 | 3 | 5 => {
                        let d = normal(&mut rng) * 0.1 * radius;
                        let dir = crate::geom::normalize([
                            normal(&mut rng),
                            normal(&mut rng),
                            normal(&mut rng),
                        ]);
                        crate::geom::scale(dir, radius + d)
                    }
                    _ => {
                        let dir = crate::geom::normalize([
                            normal(&mut rng),
                            normal(&mut rng),
                            normal(&mut rng),
                        ]);
                        crate::geom::scale(dir, rng.random::<f64>() * 0.7 * radius)
                    }
                };
                pts.extend_from_slice(&p);
                target.push(crate::geom::norm(p) - radius);
            }

            let mut tape = Tape::new();
            let leaves = params.leaves(&mut tape);
            let (vars, _) = self.vars_from_leaves(&leaves, 0);
            let p = tape.constant(Tensor::new(vec![target.len(), 3], pts)?);
            let (sdf, grad) = self.eval_with_grad(&mut tape, &vars, p)?;
            let t = tape.constant(Tensor::from_vec(target));
            let diff = tape.sub(sdf, t)?;
            let sq = tape.square(diff);
            let mse = tape.mean_all(sq);
            // Separate apex term: a mean over deep-interior samples keeps
            // the cone tip sharp without diluting the global fit.
            let mut apex_pts = vec![0.0, 0.0, 0.0];
            let mut apex_t = vec![-radius];
            for k in 0..127 {
                let dir = crate::geom::normalize([
                    normal(&mut rng),
                    normal(&mut rng),
                    normal(&mut rng),
                ]);
                if k % 2 == 0 {
                    let rr = rng.random::<f64>() * 0.5 * radius;
                    apex_pts.extend_from_slice(&crate::geom::scale(dir, rr));
                    apex_t.push(rr - radius);
                } else {
                    // Exact surface points, target zero.
                    apex_pts.extend_from_slice(&crate::geom::scale(dir, radius));
                    apex_t.push(0.0);
                }
            }
            let ap = tape.constant(Tensor::new(vec![128, 3], apex_pts)?);
            let av = self.eval(&mut tape, &vars, ap)?;
            let at = tape.constant(Tensor::from_vec(apex_t));
            let adiff = tape.sub(av, at)?;
            let asq = tape.square(adiff);
            let amse = tape.mean_all(asq);
            let amse = tape.mul_scalar(amse, 2.0);
            let mse = tape.add(mse, amse)?;
            // Eikonal on the same samples.
            let g2 = tape.square(grad);
            let g2s = tape.sum_rows(g2)?;
            let gn = tape.sqrt(g2s);
            let gd = tape.add_scalar(gn, -1.0);
            let gsq = tape.square(gd);
            let eik = tape.mean_all(gsq);
            let eikw = tape.mul_scalar(eik, 0.05);
            let loss = tape.add(mse, eikw)?;
            tape.backward(loss)?;
            let mut grads = GradAccum::zeros_like(&params);
            grads.add_from(&tape, &leaves);
            adam.step(&mut params, &grads)?;
        }
        self.update_from(&params, 0);

        // Residual measured on a fresh sample set.
        let mut pts = Vec::with_capacity(1000);
        for _ in 0..1000 {
            pts.push([
                (rng.random::<f64>() - 0.5) * 2.0 * box_half,
                (rng.random::<f64>() - 0.5) * 2.0 * box_half,
                (rng.random::<f64>() - 0.5) * 2.0 * box_half,
            ]);
        }
        let vals = self.query(&pts)?;
        let residual = pts
            .iter()
            .zip(vals.iter())
            .map(|(p, v)| (v - (crate::geom::norm(*p) - radius)).abs())
            .sum::<f64>()
            / pts.len() as f64;
        if residual > tolerance {
            return Err(HoiError::InitResidual { residual, tolerance });
        }
        Ok(residual)
    }
}

/// Sphere-initialized field: the coarse-shape starting point for every
/// reconstruction.
pub fn init_sphere(radius: f64, seed: u64) -> Result<ObjectField, HoiError> {
    let mut field = ObjectField::geometric(seed);
    field.fit_sphere(radius, 2500, 0.005, seed)?;
    Ok(field)
}

fn n_rows(tape: &Tape, v: Var) -> usize {
    tape.value(v).shape()[0]
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Evaluator for the field composed with a rigid map: `phi(R x + t)`.
/// This is the object field viewed from the hand frame.
pub struct TransformedField<F> {
    pub inner: F,
    pub rot: Var,
    pub t: Var,
}

impl<F: FieldEval> FieldEval for TransformedField<F> {
    fn eval(&self, tape: &mut Tape, points: Var) -> Result<Var, HoiError> {
        let mapped = transform_points_var(tape, points, self.rot, self.t)?;
        self.inner.eval(tape, mapped)
    }

    fn eval_with_grad(&self, tape: &mut Tape, points: Var) -> Result<(Var, Var), HoiError> {
        let mapped = transform_points_var(tape, points, self.rot, self.t)?;
        let (sdf, grad) = self.inner.eval_with_grad(tape, mapped)?;
        // d phi(Rx+t)/dx = R^T grad; as row vectors: grad_row @ R.
        let grad = tape.matmul(grad, self.rot)?;
        Ok((sdf, grad))
    }
}

/// Borrowing adapter so an [`ObjectField`] plus its tape vars satisfy
/// [`FieldEval`].
pub struct BoundField<'f> {
    pub field: &'f ObjectField,
    pub vars: FieldVars,
}

impl FieldEval for BoundField<'_> {
    fn eval(&self, tape: &mut Tape, points: Var) -> Result<Var, HoiError> {
        self.field.eval(tape, &self.vars, points)
    }

    fn eval_with_grad(&self, tape: &mut Tape, points: Var) -> Result<(Var, Var), HoiError> {
        self.field.eval_with_grad(tape, &self.vars, points)
    }
}
