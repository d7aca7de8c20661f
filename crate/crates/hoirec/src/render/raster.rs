//! Soft rasterization of the hand mesh: sigmoid silhouette coverage from
//! the signed 2D distance to the nearest projected face, attributes (depth,
//! camera-frame normal, uv) from the nearest front face.
//!
//! The whole rasterizer is one fused tape op. Gradients flow into the
//! camera-frame vertices, the focal length and the principal point through
//! the coverage and depth channels; the normal/uv channels are produced for
//! conditioning only and propagate no gradient.

use crate::error::HoiError;
use diffcore::{CustomVjp, Tape, Tensor, Var};

/// Raster output channel order (channel-major rows of the output tensor).
pub const RASTER_CHANNELS: usize = 7; // M, Draw, Nx, Ny, Nz, Uu, Uv

#[derive(Debug, Clone)]
pub struct RasterConfig {
    /// Softness of the silhouette sigmoid, in normalized image units.
    pub sigma: f64,
    /// Near plane; faces with any vertex closer are dropped.
    pub near: f64,
    /// Depth assigned to pixels no face comes near.
    pub far: f64,
    /// Faces farther than this many sigmas from a pixel are culled.
    pub cull_sigmas: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig { sigma: 0.015, near: 0.01, far: 1.0, cull_sigmas: 8.0 }
    }
}

/// Static mesh topology and per-vertex uv for rasterization.
#[derive(Debug, Clone)]
pub struct RasterMesh {
    pub faces: Vec<[usize; 3]>,
    pub uv: Vec<[f64; 2]>,
}

/// Per-pixel record saved by the forward pass for the backward pass.
#[derive(Clone, Copy)]
struct Hit {
    /// Face whose signed distance won the coverage max; -1 if none.
    cov_face: i32,
    /// Nearest edge of that face (0..3) and the segment parameter.
    cov_edge: u8,
    cov_t: f64,
    /// +1 inside, -1 outside.
    cov_sign: f64,
    d_star: f64,
    /// Face supplying depth/normal/uv; -1 if none.
    attr_face: i32,
    attr_bary: [f64; 3],
}

struct RasterVjp {
    faces: Vec<[usize; 3]>,
    pixel_uv: Vec<[f64; 2]>,
    hits: Vec<Hit>,
    sigma: f64,
}

/// Hand rasterization result: `[7, P]` channel-major tensor plus views.
pub struct RasterOut {
    pub packed: Var,
    pub mask: Var,
    pub depth_raw: Var,
    pub pixel_count: usize,
}

impl RasterOut {
    /// Normals rows `[3*P]` (channel-major Nx, Ny, Nz).
    pub fn normals(&self, tape: &mut Tape) -> Result<Var, HoiError> {
        let p = self.pixel_count;
        Ok(tape.slice(self.packed, 2 * p, 3 * p)?)
    }

    /// uv rows `[2*P]`.
    pub fn uv(&self, tape: &mut Tape) -> Result<Var, HoiError> {
        let p = self.pixel_count;
        Ok(tape.slice(self.packed, 5 * p, 2 * p)?)
    }
}

#[inline]
fn project(v: &[f64], f: f64, px: f64, py: f64) -> [f64; 3] {
    [f * v[0] / v[2] + px, f * v[1] / v[2] + py, v[2]]
}

#[inline]
fn cross2(ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    ax * by - ay * bx
}

/// Signed distance from point p to triangle (a, b, c) in 2D: positive
/// inside, negative outside; also returns the nearest edge and parameter.
fn signed_distance_2d(p: [f64; 2], tri: &[[f64; 3]; 3]) -> (f64, u8, f64, f64) {
    let area = cross2(
        tri[1][0] - tri[0][0],
        tri[1][1] - tri[0][1],
        tri[2][0] - tri[0][0],
        tri[2][1] - tri[0][1],
    );
    let orient = if area >= 0.0 { 1.0 } else { -1.0 };
    let mut inside = true;
    let mut best = f64::INFINITY;
    let mut best_edge = 0u8;
    let mut best_t = 0.0;
    for e in 0..3 {
        let a = tri[e];
        let b = tri[(e + 1) % 3];
        // Side test against the oriented edge.
        let side = cross2(b[0] - a[0], b[1] - a[1], p[0] - a[0], p[1] - a[1]) * orient;
        if side < 0.0 {
            inside = false;
        }
        let ex = b[0] - a[0];
        let ey = b[1] - a[1];
        let len2 = (ex * ex + ey * ey).max(1e-18);
        let t = (((p[0] - a[0]) * ex + (p[1] - a[1]) * ey) / len2).clamp(0.0, 1.0);
        let qx = a[0] + t * ex;
        let qy = a[1] + t * ey;
        let d = ((p[0] - qx).powi(2) + (p[1] - qy).powi(2)).sqrt();
        if d < best {
            best = d;
            best_edge = e as u8;
            best_t = t;
        }
    }
    let sign = if inside { 1.0 } else { -1.0 };
    (sign * best, best_edge, best_t, sign)
}

/// Unnormalized barycentric weights and their common denominator.
fn barycentric(p: [f64; 2], tri: &[[f64; 3]; 3]) -> ([f64; 3], f64) {
    let t = cross2(
        tri[1][0] - tri[0][0],
        tri[1][1] - tri[0][1],
        tri[2][0] - tri[0][0],
        tri[2][1] - tri[0][1],
    );
    let w0 = cross2(
        tri[1][0] - p[0],
        tri[1][1] - p[1],
        tri[2][0] - p[0],
        tri[2][1] - p[1],
    );
    let w1 = cross2(
        tri[2][0] - p[0],
        tri[2][1] - p[1],
        tri[0][0] - p[0],
        tri[0][1] - p[1],
    );
    let w2 = cross2(
        tri[0][0] - p[0],
        tri[0][1] - p[1],
        tri[1][0] - p[0],
        tri[1][1] - p[1],
    );
    ([w0, w1, w2], t)
}

/// Rasterize camera-frame vertices over a pixel set.
///
/// `pixel_uv` are the normalized pixel centers (constant geometry of the
/// image grid). Gradients reach `verts_cam` `[V,3]`, `focal` `[1]` and
/// `principal` `[2]` through the mask and raw-depth channels.
pub fn render_hand(
    tape: &mut Tape,
    mesh: &RasterMesh,
    verts_cam: Var,
    focal: Var,
    principal: Var,
    pixel_uv: &[[f64; 2]],
    cfg: &RasterConfig,
) -> Result<RasterOut, HoiError> {
    if mesh.faces.is_empty() {
        return Err(HoiError::Degenerate("empty mesh".into()));
    }
    let p_count = pixel_uv.len();
    let verts = tape.value(verts_cam).data().to_vec();
    let v_count = verts.len() / 3;
    if mesh.uv.len() != v_count {
        return Err(HoiError::Invalid("uv count must match vertices".into()));
    }
    let f = tape.value(focal).data()[0];
    let pp = tape.value(principal).data();
    let (px, py) = (pp[0], pp[1]);

    // Project all vertices once.
    let mut proj = vec![[0.0; 3]; v_count];
    let mut valid = vec![true; v_count];
    for i in 0..v_count {
        let v = &verts[3 * i..3 * i + 3];
        if v[2] <= cfg.near {
            valid[i] = false;
            continue;
        }
        proj[i] = project(v, f, px, py);
    }

    // Pixel spatial index over normalized coordinates.
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for uv in pixel_uv {
        for c in 0..2 {
            lo[c] = lo[c].min(uv[c]);
            hi[c] = hi[c].max(uv[c]);
        }
    }
    let cell = (cfg.sigma).max(1e-3) * 2.0;
    let nx = (((hi[0] - lo[0]) / cell).ceil() as usize + 1).max(1);
    let ny = (((hi[1] - lo[1]) / cell).ceil() as usize + 1).max(1);
    let mut grid: Vec<Vec<u32>> = vec![Vec::new(); nx * ny];
    for (i, uv) in pixel_uv.iter().enumerate() {
        let gx = (((uv[0] - lo[0]) / cell) as usize).min(nx - 1);
        let gy = (((uv[1] - lo[1]) / cell) as usize).min(ny - 1);
        grid[gy * nx + gx].push(i as u32);
    }

    let mut hits = vec![
        Hit {
            cov_face: -1,
            cov_edge: 0,
            cov_t: 0.0,
            cov_sign: -1.0,
            d_star: f64::NEG_INFINITY,
            attr_face: -1,
            attr_bary: [0.0; 3],
        };
        p_count
    ];
    let mut attr_depth = vec![f64::INFINITY; p_count];

    let margin = cfg.cull_sigmas * cfg.sigma;
    for (fi, face) in mesh.faces.iter().enumerate() {
        if face.iter().any(|&i| !valid[i]) {
            continue;
        }
        let tri = [proj[face[0]], proj[face[1]], proj[face[2]]];
        let (_, t_area) = barycentric([0.0, 0.0], &tri);
        if t_area.abs() < 1e-14 {
            continue; // degenerate projection
        }
        let (mut blo, mut bhi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for v in &tri {
            for c in 0..2 {
                blo[c] = blo[c].min(v[c] - margin);
                bhi[c] = bhi[c].max(v[c] + margin);
            }
        }
        let gx0 = (((blo[0] - lo[0]) / cell).floor().max(0.0) as usize).min(nx - 1);
        let gy0 = (((blo[1] - lo[1]) / cell).floor().max(0.0) as usize).min(ny - 1);
        let gx1 = (((bhi[0] - lo[0]) / cell).ceil().max(0.0) as usize).min(nx - 1);
        let gy1 = (((bhi[1] - lo[1]) / cell).ceil().max(0.0) as usize).min(ny - 1);
        for gy in gy0..=gy1 {
            for gx in gx0..=gx1 {
                for &pi in &grid[gy * nx + gx] {
                    let pi = pi as usize;
                    let puv = pixel_uv[pi];
                    if puv[0] < blo[0] || puv[0] > bhi[0] || puv[1] < blo[1] || puv[1] > bhi[1] {
                        continue;
                    }
                    let (d, edge, t, sign) = signed_distance_2d(puv, &tri);
                    let h = &mut hits[pi];
                    if d > h.d_star {
                        h.d_star = d;
                        h.cov_face = fi as i32;
                        h.cov_edge = edge;
                        h.cov_t = t;
                        h.cov_sign = sign;
                    }
                    // Front-most containing face supplies attributes.
                    if d >= 0.0 {
                        let (w, tt) = barycentric(puv, &tri);
                        let b = [w[0] / tt, w[1] / tt, w[2] / tt];
                        let z = b[0] * tri[0][2] + b[1] * tri[1][2] + b[2] * tri[2][2];
                        if z < attr_depth[pi] {
                            attr_depth[pi] = z;
                            h.attr_face = fi as i32;
                            h.attr_bary = b;
                        }
                    }
                }
            }
        }
    }

    // Pixels covered by no containing face fall back to the coverage face
    // with extrapolated (unclamped) barycentrics: smooth across the edge.
    for pi in 0..p_count {
        let h = &mut hits[pi];
        if h.attr_face < 0 && h.cov_face >= 0 {
            let face = mesh.faces[h.cov_face as usize];
            let tri = [proj[face[0]], proj[face[1]], proj[face[2]]];
            let (w, tt) = barycentric(pixel_uv[pi], &tri);
            h.attr_face = h.cov_face;
            h.attr_bary = [w[0] / tt, w[1] / tt, w[2] / tt];
        }
    }

    // Assemble the packed [7, P] output.
    let mut out = vec![0.0; RASTER_CHANNELS * p_count];
    for pi in 0..p_count {
        let h = &hits[pi];
        let cov = if h.cov_face >= 0 {
            diffcore::sigmoid(h.d_star / cfg.sigma)
        } else {
            0.0
        };
        out[pi] = cov;
        if h.attr_face >= 0 {
            let face = mesh.faces[h.attr_face as usize];
            let b = h.attr_bary;
            let z = b[0] * proj[face[0]][2] + b[1] * proj[face[1]][2] + b[2] * proj[face[2]][2];
            out[p_count + pi] = z;
            // Face normal in the camera frame, oriented toward the camera.
            let v0 = &verts[3 * face[0]..3 * face[0] + 3];
            let v1 = &verts[3 * face[1]..3 * face[1] + 3];
            let v2 = &verts[3 * face[2]..3 * face[2] + 3];
            let e1 = [v1[0] - v0[0], v1[1] - v0[1], v1[2] - v0[2]];
            let e2 = [v2[0] - v0[0], v2[1] - v0[1], v2[2] - v0[2]];
            let mut n = [
                e1[1] * e2[2] - e1[2] * e2[1],
                e1[2] * e2[0] - e1[0] * e2[2],
                e1[0] * e2[1] - e1[1] * e2[0],
            ];
            let nn = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt().max(1e-15);
            for v in n.iter_mut() {
                *v /= nn;
            }
            if n[2] > 0.0 {
                for v in n.iter_mut() {
                    *v = -*v;
                }
            }
            out[2 * p_count + pi] = n[0];
            out[3 * p_count + pi] = n[1];
            out[4 * p_count + pi] = n[2];
            let uv0 = mesh.uv[face[0]];
            let uv1 = mesh.uv[face[1]];
            let uv2 = mesh.uv[face[2]];
            out[5 * p_count + pi] = b[0] * uv0[0] + b[1] * uv1[0] + b[2] * uv2[0];
            out[6 * p_count + pi] = b[0] * uv0[1] + b[1] * uv1[1] + b[2] * uv2[1];
        } else {
            out[p_count + pi] = cfg.far;
        }
    }

    let vjp = RasterVjp {
        faces: mesh.faces.clone(),
        pixel_uv: pixel_uv.to_vec(),
        hits,
        sigma: cfg.sigma,
    };
    let packed = tape.custom(
        &[verts_cam, focal, principal],
        Tensor::new(vec![RASTER_CHANNELS, p_count], out)?,
        Box::new(vjp),
    )?;
    let mask = tape.slice(packed, 0, p_count)?;
    let depth_raw = tape.slice(packed, p_count, p_count)?;
    Ok(RasterOut { packed, mask, depth_raw, pixel_count: p_count })
}

impl RasterVjp {
    /// d(projected u,v)/d(vertex xyz, focal, principal) chain for one
    /// gradient (gu, gv) arriving at the projection of vertex `vi`.
    #[allow(clippy::too_many_arguments)]
    fn chain_projection(
        verts: &[f64],
        f: f64,
        vi: usize,
        gu: f64,
        gv: f64,
        gverts: Option<&mut Vec<f64>>,
        gfocal: Option<&mut Vec<f64>>,
        gprincipal: Option<&mut Vec<f64>>,
    ) {
        let x = verts[3 * vi];
        let y = verts[3 * vi + 1];
        let z = verts[3 * vi + 2];
        if let Some(gv3) = gverts {
            gv3[3 * vi] += gu * f / z;
            gv3[3 * vi + 1] += gv * f / z;
            gv3[3 * vi + 2] += -(gu * f * x + gv * f * y) / (z * z);
        }
        if let Some(gf) = gfocal {
            gf[0] += gu * x / z + gv * y / z;
        }
        if let Some(gp) = gprincipal {
            gp[0] += gu;
            gp[1] += gv;
        }
    }
}

impl CustomVjp for RasterVjp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
        grads: &mut [Option<&mut Vec<f64>>],
    ) {
        let verts = inputs[0].data();
        let f = inputs[1].data()[0];
        let pp = inputs[2].data();
        let p_count = self.pixel_uv.len();
        let out = output.data();

        // Split the mutable gradient slots.
        let (gv_slot, rest) = grads.split_at_mut(1);
        let (gf_slot, gp_slot) = rest.split_at_mut(1);

        for pi in 0..p_count {
            let h = &self.hits[pi];
            if h.cov_face < 0 {
                continue;
            }
            let g_mask = grad_out[pi];
            let g_depth = grad_out[p_count + pi];
            if g_mask == 0.0 && g_depth == 0.0 {
                continue;
            }
            let puv = self.pixel_uv[pi];

            // Coverage path: d(sigmoid(d*/s))/d(edge endpoints).
            if g_mask != 0.0 {
                let cov = out[pi];
                let dcov_dd = cov * (1.0 - cov) / self.sigma;
                let face = self.faces[h.cov_face as usize];
                let a_i = face[h.cov_edge as usize];
                let b_i = face[(h.cov_edge as usize + 1) % 3];
                let pa = project(&verts[3 * a_i..3 * a_i + 3], f, pp[0], pp[1]);
                let pb = project(&verts[3 * b_i..3 * b_i + 3], f, pp[0], pp[1]);
                let t = h.cov_t;
                let q = [pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1])];
                let diff = [puv[0] - q[0], puv[1] - q[1]];
                let dist = (diff[0] * diff[0] + diff[1] * diff[1]).sqrt().max(1e-12);
                // d_signed = sign * |p - q|; dq/da = (1-t) I, dq/db = t I.
                let gq = [
                    -h.cov_sign * diff[0] / dist * dcov_dd * g_mask,
                    -h.cov_sign * diff[1] / dist * dcov_dd * g_mask,
                ];
                for (vi, wq) in [(a_i, 1.0 - t), (b_i, t)] {
                    Self::chain_projection(
                        verts,
                        f,
                        vi,
                        gq[0] * wq,
                        gq[1] * wq,
                        gv_slot[0].as_deref_mut(),
                        gf_slot[0].as_deref_mut(),
                        gp_slot[0].as_deref_mut(),
                    );
                }
            }

            // Depth path: z = sum_i b_i z_i with b from 2D barycentrics.
            if g_depth != 0.0 && h.attr_face >= 0 {
                let face = self.faces[h.attr_face as usize];
                let tri = [
                    project(&verts[3 * face[0]..3 * face[0] + 3], f, pp[0], pp[1]),
                    project(&verts[3 * face[1]..3 * face[1] + 3], f, pp[0], pp[1]),
                    project(&verts[3 * face[2]..3 * face[2] + 3], f, pp[0], pp[1]),
                ];
                let b = h.attr_bary;
                let zs = [tri[0][2], tri[1][2], tri[2][2]];
                // Direct z path: dz/dz_i = b_i (z_i depends on vertex z only).
                for k in 0..3 {
                    let vi = face[k];
                    if let Some(gv3) = gv_slot[0].as_deref_mut() {
                        gv3[3 * vi + 2] += g_depth * b[k];
                    }
                }
                // Barycentric path: db/d(projected 2D vertices).
                let (w, t_area) = barycentric(puv, &tri);
                let _ = w;
                let grad_t = [
                    // dT/dA, dT/dB, dT/dC as (d/dx, d/dy)
                    [tri[1][1] - tri[2][1], tri[2][0] - tri[1][0]],
                    [tri[2][1] - tri[0][1], tri[0][0] - tri[2][0]],
                    [tri[0][1] - tri[1][1], tri[1][0] - tri[0][0]],
                ];
                // dw_k/dV_j: w_k = cross2(V_{k+1} - p, V_{k+2} - p).
                let mut gw = [[[0.0; 2]; 3]; 3]; // gw[k][j] = dw_k/dV_j
                for k in 0..3 {
                    let j1 = (k + 1) % 3;
                    let j2 = (k + 2) % 3;
                    gw[k][j1] = [tri[j2][1] - puv[1], -(tri[j2][0] - puv[0])];
                    gw[k][j2] = [-(tri[j1][1] - puv[1]), tri[j1][0] - puv[0]];
                }
                for j in 0..3 {
                    let mut gu = 0.0;
                    let mut gvv = 0.0;
                    for k in 0..3 {
                        // b_k = w_k / T; db_k/dV = (dw_k/dV - b_k dT/dV)/T
                        let c = g_depth * zs[k] / t_area;
                        gu += c * (gw[k][j][0] - b[k] * grad_t[j][0]);
                        gvv += c * (gw[k][j][1] - b[k] * grad_t[j][1]);
                    }
                    Self::chain_projection(
                        verts,
                        f,
                        face[j],
                        gu,
                        gvv,
                        gv_slot[0].as_deref_mut(),
                        gf_slot[0].as_deref_mut(),
                        gp_slot[0].as_deref_mut(),
                    );
                }
            }
        }
    }
}
