//! Depth-aware soft blending of the hand and object layers into a
//! two-channel semantic mask.
//!
//! Per pixel, with z_k = m_k (far - d_k) / (far - near):
//!
//!   w_k = m_k exp((z_k - maxZ) / gamma),   w_bg = exp((0 - maxZ) / gamma)
//!   out_k = w_k / (w_h + w_o + w_bg)
//!
//! maxZ is the max of z over both layers and all pixels. Because every
//! weight carries the same exp(-maxZ / gamma) factor it cancels in the
//! ratio, so it is applied as a detached constant: pure overflow guard,
//! exact same value and gradient.

use crate::error::HoiError;
use diffcore::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct BlendConfig {
    /// Softness of the depth competition; hard front-surface as gamma -> 0.
    pub gamma: f64,
    /// Depth window shared with the renderers.
    pub near: f64,
    pub far: f64,
}

impl Default for BlendConfig {
    fn default() -> Self {
        BlendConfig { gamma: 1e-2, near: 0.05, far: 1.0 }
    }
}

/// Blended semantic channels for one pixel batch.
pub struct Blended {
    pub hand: Var,
    pub object: Var,
}

/// Soft two-layer compositing from per-pixel masks and raw depths.
pub fn blend(
    tape: &mut Tape,
    hand_mask: Var,
    hand_depth_raw: Var,
    obj_mask: Var,
    obj_depth_raw: Var,
    cfg: &BlendConfig,
) -> Result<Blended, HoiError> {
    if cfg.far <= cfg.near {
        return Err(HoiError::Invalid(format!(
            "blend depth window needs far > near, got [{}, {}]",
            cfg.near, cfg.far
        )));
    }
    let p = tape.value(hand_mask).numel();
    for v in [hand_depth_raw, obj_mask, obj_depth_raw] {
        if tape.value(v).numel() != p {
            return Err(HoiError::Invalid("blend inputs must share pixel count".into()));
        }
    }
    let z = |tape: &mut Tape, m: Var, d: Var| -> Result<Var, HoiError> {
        let neg = tape.mul_scalar(d, -1.0 / (cfg.far - cfg.near));
        let shifted = tape.add_scalar(neg, cfg.far / (cfg.far - cfg.near));
        Ok(tape.mul(m, shifted)?)
    };
    let zh = z(tape, hand_mask, hand_depth_raw)?;
    let zo = z(tape, obj_mask, obj_depth_raw)?;

    // Per-pixel detached stability shift. Every weight at a pixel carries
    // the same exp(-maxZ/gamma) factor, so it cancels exactly in the ratio;
    // keeping it per pixel (with the background's z = 0 in the max) ensures
    // at least one weight stays exp(0) = 1 and nothing over- or underflows
    // even as gamma -> 0.
    let max_z: Vec<f64> = tape
        .value(zh)
        .data()
        .iter()
        .zip(tape.value(zo).data().iter())
        .map(|(a, b)| a.max(*b).max(0.0))
        .collect();
    let neg_max = tape.constant(Tensor::from_vec(max_z.iter().map(|v| -v).collect()));

    let weight = |tape: &mut Tape, m: Var, zv: Var| -> Result<Var, HoiError> {
        let shifted = tape.add(zv, neg_max)?;
        let scaled = tape.mul_scalar(shifted, 1.0 / cfg.gamma);
        let e = tape.exp(scaled);
        Ok(tape.mul(m, e)?)
    };
    let wh = weight(tape, hand_mask, zh)?;
    let wo = weight(tape, obj_mask, zo)?;
    let w_bg = tape.constant(Tensor::from_vec(
        max_z.iter().map(|v| (-v / cfg.gamma).exp()).collect(),
    ));
    let sum = tape.add(wh, wo)?;
    let denom = tape.add(sum, w_bg)?;
    let hand = tape.div(wh, denom)?;
    let object = tape.div(wo, denom)?;
    Ok(Blended { hand, object })
}

/// Scalar reference implementation of the same formula, used as the oracle
/// in tests: one pixel, plain f64. The max-shift is part of the weight
/// definition (w_k = m_k exp((z_k - max Z)/gamma)); here the max runs over
/// this pixel's layers, the background sitting at z = 0.
pub fn blend_scalar_reference(
    m_h: f64,
    d_h: f64,
    m_o: f64,
    d_o: f64,
    cfg: &BlendConfig,
) -> (f64, f64) {
    let z_h = m_h * (cfg.far - d_h) / (cfg.far - cfg.near);
    let z_o = m_o * (cfg.far - d_o) / (cfg.far - cfg.near);
    let max_z = z_h.max(z_o).max(0.0);
    let w_h = m_h * ((z_h - max_z) / cfg.gamma).exp();
    let w_o = m_o * ((z_o - max_z) / cfg.gamma).exp();
    let w_bg = ((0.0 - max_z) / cfg.gamma).exp();
    let denom = w_h + w_o + w_bg;
    (w_h / denom, w_o / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_blend(m_h: f64, d_h: f64, m_o: f64, d_o: f64, cfg: &BlendConfig) -> (f64, f64) {
        let mut tape = Tape::new();
        let mh = tape.constant(Tensor::from_vec(vec![m_h]));
        let dh = tape.constant(Tensor::from_vec(vec![d_h]));
        let mo = tape.constant(Tensor::from_vec(vec![m_o]));
        let dv = tape.constant(Tensor::from_vec(vec![d_o]));
        let out = blend(&mut tape, mh, dh, mo, dv, cfg).unwrap();
        (
            tape.value(out.hand).data()[0],
            tape.value(out.object).data()[0],
        )
    }

    #[test]
    fn empty_masks_blend_to_background() {
        let cfg = BlendConfig::default();
        let (h, o) = run_blend(0.0, 1.0, 0.0, 1.0, &cfg);
        assert_eq!((h, o), (0.0, 0.0));
    }

    #[test]
    fn lone_hand_layer_saturates_for_small_gamma() {
        // gamma 1e-3 with an on-surface hand at the near plane: the hand
        // weight dwarfs the background weight exp(0)/exp(1/gamma).
        let cfg = BlendConfig { gamma: 1e-3, near: 0.05, far: 1.0 };
        let (h, o) = run_blend(1.0, 0.05, 0.0, 1.0, &cfg);
        assert!(h > 0.999, "hand channel {h}");
        assert_eq!(o, 0.0);
    }

    #[test]
    fn front_surface_wins_as_gamma_shrinks() {
        let near = 0.05;
        let far = 1.0;
        for gamma in [1e-2, 1e-3, 1e-4] {
            let cfg = BlendConfig { gamma, near, far };
            let (h, o) = run_blend(1.0, 0.3, 1.0, 0.6, &cfg);
            if gamma <= 1e-4 {
                assert!(h > 0.999 && o < 1e-3, "gamma {gamma}: ({h}, {o})");
            }
            // Always matches the scalar reference.
            let (rh, ro) = blend_scalar_reference(1.0, 0.3, 1.0, 0.6, &cfg);
            assert!((h - rh).abs() < 1e-12 && (o - ro).abs() < 1e-12);
        }
    }

    #[test]
    fn channels_plus_background_share_sum_to_one() {
        let cfg = BlendConfig::default();
        let (h, o) = run_blend(0.8, 0.4, 0.6, 0.3, &cfg);
        assert!(h >= 0.0 && o >= 0.0 && h + o <= 1.0 + 1e-12);
        // The implicit background share completes the partition.
        let (rh, ro) = blend_scalar_reference(0.8, 0.4, 0.6, 0.3, &cfg);
        assert!((h - rh).abs() < 1e-12 && (o - ro).abs() < 1e-12);
    }

    #[test]
    fn swapping_layers_swaps_channels() {
        let cfg = BlendConfig::default();
        let (h, o) = run_blend(0.7, 0.35, 0.4, 0.55, &cfg);
        let (h2, o2) = run_blend(0.4, 0.55, 0.7, 0.35, &cfg);
        assert_eq!((h, o), (o2, h2));
    }

    #[test]
    fn rejects_bad_depth_window() {
        let cfg = BlendConfig { gamma: 1e-2, near: 1.0, far: 0.5 };
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![0.0]));
        assert!(blend(&mut tape, a, a, a, a, &cfg).is_err());
    }
}
