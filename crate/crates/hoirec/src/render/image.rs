//! Geometry images: the renderer's multi-channel output and the diffusion
//! model's pixel format.
//!
//! Channel order everywhere: M (mask), D (normalized depth), Nx, Ny, Nz
//! (camera-frame normals), then Uu, Uv for hand images. Depth is
//! mask-weighted and normalized over the configured [near, far] window so
//! far maps to 0 and near to 1; pixels outside the mask are zero.

use crate::error::HoiError;
use diffcore::Tensor;

/// Channel count of an object geometry image.
pub const OBJ_CHANNELS: usize = 5;
/// Channel count of a hand geometry image (object channels + uv).
pub const HAND_CHANNELS: usize = 7;

#[derive(Debug, Clone)]
pub struct GeometryImage {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<f64>,
    /// Normalized depth (the blending z), zero outside the mask.
    pub depth: Vec<f64>,
    /// Raw expected termination depth in meters (background at far).
    pub depth_raw: Vec<f64>,
    /// Camera-frame unit normals, channel-major [3, H*W].
    pub normals: Vec<f64>,
    /// Hand uv channels, channel-major [2, H*W]; empty for objects.
    pub uv: Vec<f64>,
}

impl GeometryImage {
    pub fn zeros(width: usize, height: usize, with_uv: bool) -> Self {
        let hw = width * height;
        GeometryImage {
            width,
            height,
            mask: vec![0.0; hw],
            depth: vec![0.0; hw],
            depth_raw: vec![0.0; hw],
            normals: vec![0.0; 3 * hw],
            uv: if with_uv { vec![0.0; 2 * hw] } else { Vec::new() },
        }
    }

    pub fn has_uv(&self) -> bool {
        !self.uv.is_empty()
    }

    pub fn channel_count(&self) -> usize {
        if self.has_uv() {
            HAND_CHANNELS
        } else {
            OBJ_CHANNELS
        }
    }

    /// Pack into a channel-major [C, H, W] tensor in the documented order.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.width * self.height;
        let c = self.channel_count();
        let mut data = Vec::with_capacity(c * hw);
        data.extend_from_slice(&self.mask);
        data.extend_from_slice(&self.depth);
        data.extend_from_slice(&self.normals);
        if self.has_uv() {
            data.extend_from_slice(&self.uv);
        }
        Tensor::new(vec![c, self.height, self.width], data).expect("channel shape")
    }

    /// Rebuild from a [C, H, W] tensor (5 or 7 channels). The raw depth is
    /// not representable there and is left zero.
    pub fn from_tensor(t: &Tensor) -> Result<Self, HoiError> {
        let s = t.shape();
        if s.len() != 3 || (s[0] != OBJ_CHANNELS && s[0] != HAND_CHANNELS) {
            return Err(HoiError::Format(format!(
                "geometry image tensor must be [5|7, H, W], got {s:?}"
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let hw = h * w;
        let d = t.data();
        Ok(GeometryImage {
            width: w,
            height: h,
            mask: d[0..hw].to_vec(),
            depth: d[hw..2 * hw].to_vec(),
            depth_raw: vec![0.0; hw],
            normals: d[2 * hw..5 * hw].to_vec(),
            uv: if c == HAND_CHANNELS {
                d[5 * hw..7 * hw].to_vec()
            } else {
                Vec::new()
            },
        })
    }

    /// Mean intersection-over-union against a binary mask at threshold 0.5.
    pub fn mask_iou(&self, other: &[f64]) -> f64 {
        let mut inter = 0.0;
        let mut union = 0.0;
        for (a, b) in self.mask.iter().zip(other.iter()) {
            let a = *a > 0.5;
            let b = *b > 0.5;
            if a && b {
                inter += 1.0;
            }
            if a || b {
                union += 1.0;
            }
        }
        if union == 0.0 {
            1.0
        } else {
            inter / union
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_preserves_channels() {
        let mut g = GeometryImage::zeros(4, 3, true);
        g.mask[5] = 0.7;
        g.depth[2] = 0.3;
        g.normals[12 + 1] = -0.5;
        g.uv[7] = 0.9;
        let t = g.to_tensor();
        assert_eq!(t.shape(), &[7, 3, 4]);
        let back = GeometryImage::from_tensor(&t).unwrap();
        assert_eq!(back.mask, g.mask);
        assert_eq!(back.depth, g.depth);
        assert_eq!(back.normals, g.normals);
        assert_eq!(back.uv, g.uv);
    }
}
