//! Adam / AdamW with an exponential learning-rate schedule, plus the
//! named parameter collection the optimization loops work on.

use crate::tensor::Tensor;
use crate::{DiffError, Tape, Var};

/// Configuration for [`AdamState`].
#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Per-step multiplicative factor on the learning rate (1.0 = constant).
    pub lr_decay: f64,
    /// Decoupled weight decay; 0.0 gives plain Adam.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_decay: 1.0,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    /// Decay factor so the rate falls to `final_ratio` after `steps` steps.
    pub fn decay_over(steps: usize, final_ratio: f64) -> f64 {
        if steps == 0 {
            1.0
        } else {
            final_ratio.powf(1.0 / steps as f64)
        }
    }
}

/// First/second moment accumulators for one parameter set.
pub struct AdamState {
    cfg: AdamConfig,
    lr_now: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Steps skipped because a gradient was non-finite.
    pub skipped: u64,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        let m = params.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        let v = params.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        let lr_now = cfg.lr;
        AdamState { cfg, lr_now, step: 0, m, v, skipped: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr_now
    }

    /// One bias-corrected update. Skips (and counts) non-finite gradients;
    /// the learning rate decays once per call either way.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradAccum) -> Result<(), DiffError> {
        if grads.bufs.len() != params.tensors.len() {
            return Err(DiffError::Invalid(format!(
                "adam: {} gradient buffers for {} parameters",
                grads.bufs.len(),
                params.tensors.len()
            )));
        }
        let finite = grads.bufs.iter().all(|g| g.iter().all(|v| v.is_finite()));
        if !finite {
            self.skipped += 1;
            self.lr_now *= self.cfg.lr_decay;
            return Ok(());
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        let lr = self.lr_now;
        for ((p, g), (m, v)) in params
            .tensors
            .iter_mut()
            .zip(grads.bufs.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if g.len() != p.numel() {
                return Err(DiffError::Invalid("adam: gradient shape mismatch".into()));
            }
            let data = p.data_mut();
            for i in 0..data.len() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * (mhat / (vhat.sqrt() + self.cfg.eps));
                if self.cfg.weight_decay > 0.0 {
                    data[i] -= lr * self.cfg.weight_decay * data[i];
                }
            }
        }
        self.lr_now *= self.cfg.lr_decay;
        Ok(())
    }
}

/// Named, ordered parameter tensors. The order is the contract between
/// leaves pushed onto a tape and the gradient buffers collected back.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn total_numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Push every parameter onto `tape` as a leaf, in set order.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }
}

/// Gradient accumulator aligned with a [`ParamSet`].
///
/// Losses evaluated on separate tapes (pixel chunks, batch items) add
/// their leaf gradients here; the sum feeds one optimizer step.
pub struct GradAccum {
    bufs: Vec<Vec<f64>>,
}

impl GradAccum {
    pub fn zeros_like(params: &ParamSet) -> Self {
        GradAccum {
            bufs: params.tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn buffers(&self) -> &[Vec<f64>] {
        &self.bufs
    }

    pub fn buffers_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.bufs
    }

    /// Accumulate leaf gradients from a swept tape, scaled by `scale`.
    pub fn add_scaled(&mut self, tape: &Tape, leaves: &[Var], scale: f64) {
        for (buf, leaf) in self.bufs.iter_mut().zip(leaves.iter()) {
            if let Some(g) = tape.grad(*leaf) {
                for (b, gv) in buf.iter_mut().zip(g.iter()) {
                    *b += scale * *gv;
                }
            }
        }
    }

    pub fn add_from(&mut self, tape: &Tape, leaves: &[Var]) {
        self.add_scaled(tape, leaves, 1.0);
    }

    /// Merge another accumulator (same layout) into this one.
    pub fn merge(&mut self, other: &GradAccum) {
        for (a, b) in self.bufs.iter_mut().zip(other.bufs.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += *y;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.bufs
            .iter()
            .flat_map(|b| b.iter())
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.bufs.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}
