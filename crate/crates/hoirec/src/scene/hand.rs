//! The parametric articulated hand: a low-poly proxy with the same symbol
//! layout as a full statistical hand model — 10 shape parameters scaling
//! bones and widths, 45 articulation parameters (15 finger joints, 3
//! axis-angle each), linear-blend skinning over a 16-joint chain.
//!
//! The canonical wrist frame has the wrist at the origin, fingers along +y,
//! palm facing +z, thumb toward -x. Wrist orientation is *not* part of the
//! articulation; it lives in the camera/pose transforms, so this frame is
//! invariant to it.

use crate::error::HoiError;
use crate::geom::{self, rodrigues_var, transpose3_var, V3};
use diffcore::{Tape, Tensor, Var};

pub const N_JOINTS: usize = 16;
pub const N_FINGERS: usize = 5;
pub const BETA_DIM: usize = 10;
pub const THETA_DIM: usize = 45;

/// Exponent gain: a shape coefficient of 1.0 scales its group by e^0.1.
const BETA_GAIN: f64 = 0.1;

/// Tape handles produced by [`HandProxy::skin`].
pub struct HandVars {
    /// Skinned mesh vertices `[V,3]` in the canonical wrist frame.
    pub verts: Var,
    /// Posed joint centers `[16,3]`.
    pub joints: Var,
}

/// Per-joint shape-scaling exponents over the 10 shape coefficients.
type BetaMap = [f64; BETA_DIM];

#[derive(Debug, Clone, PartialEq)]
pub struct HandProxy {
    /// Parent index per joint; -1 for the wrist root.
    pub joint_parent: Vec<i32>,
    /// Rest offset from the parent joint (meters, canonical frame).
    pub joint_offset: Vec<V3>,
    /// Length-scale exponents for the bone *into* each joint.
    pub len_map: Vec<BetaMap>,
    /// Local lengthwise stretch exponents (the bone leaving the joint).
    pub stretch_map: Vec<BetaMap>,
    /// Local transverse width exponents.
    pub width_map: Vec<BetaMap>,
    /// Rest vertices at beta = 0.
    pub verts: Vec<V3>,
    pub uv: Vec<[f64; 2]>,
    /// Sparse skinning weights per vertex; each row sums to 1.
    pub weights: Vec<Vec<(usize, f64)>>,
    pub faces: Vec<[usize; 3]>,
}

impl HandProxy {
    pub fn vertex_count(&self) -> usize {
        self.verts.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// The proxy shipped with the repo (see `assets/hand_proxy.txt`).
    pub fn bundled() -> Self {
        static ASSET: &str = include_str!("../../../../assets/hand_proxy.txt");
        Self::from_asset_str(ASSET).expect("bundled hand asset parses")
    }

    /// Procedural construction; the bundled asset is this, serialized.
    pub fn default_proxy() -> Self {
        build_proxy()
    }

    fn scale_factor(beta: &[f64], map: &BetaMap) -> f64 {
        let mut acc = 0.0;
        for (b, e) in beta.iter().zip(map.iter()) {
            acc += b * e;
        }
        (BETA_GAIN * acc).exp()
    }

    /// Plain forward kinematics: posed joint centers for given shape and
    /// articulation (and optionally a global wrist rotation).
    pub fn fk(&self, beta: &[f64], theta: &[f64], wrist_rot: Option<&geom::M3>) -> Vec<V3> {
        assert_eq!(beta.len(), BETA_DIM);
        assert_eq!(theta.len(), THETA_DIM);
        let root = wrist_rot.copied().unwrap_or(geom::IDENTITY_M3);
        let mut rots = vec![geom::IDENTITY_M3; N_JOINTS];
        let mut pos = vec![[0.0; 3]; N_JOINTS];
        rots[0] = root;
        for j in 1..N_JOINTS {
            let p = self.joint_parent[j] as usize;
            let scale = Self::scale_factor(beta, &self.len_map[j]);
            let off = geom::scale(self.joint_offset[j], scale);
            pos[j] = geom::add(pos[p], geom::mat_vec(&rots[p], off));
            let local = geom::axis_angle_to_mat([
                theta[3 * (j - 1)],
                theta[3 * (j - 1) + 1],
                theta[3 * (j - 1) + 2],
            ]);
            rots[j] = geom::mat_mul(&rots[p], &local);
        }
        pos
    }

    /// Linear-blend skinning on the tape: differentiable with respect to
    /// `beta` `[10]` and `theta` `[45]`.
    pub fn skin(&self, tape: &mut Tape, beta: Var, theta: Var) -> Result<HandVars, HoiError> {
        if !tape.value(theta).is_finite() || !tape.value(beta).is_finite() {
            return Err(HoiError::NonFinite("hand articulation parameters".into()));
        }
        let v = self.vertex_count();
        let beta_row = tape.reshape(beta, vec![1, BETA_DIM])?;

        let factor = |tape: &mut Tape, map: &BetaMap| -> Result<Var, HoiError> {
            let e = tape.constant(Tensor::new(vec![BETA_DIM, 1], map.to_vec())?);
            let d = tape.matmul(beta_row, e)?;
            let d = tape.mul_scalar(d, BETA_GAIN);
            let d = tape.exp(d);
            Ok(tape.reshape(d, vec![])?)
        };

        // Forward kinematics on tape. Rotations are [3,3]; positions [3].
        let mut rots: Vec<Var> = Vec::with_capacity(N_JOINTS);
        let mut pos: Vec<Var> = Vec::with_capacity(N_JOINTS);
        let mut rest: Vec<Var> = Vec::with_capacity(N_JOINTS);
        let ident = tape.constant(Tensor::new(vec![3, 3], geom::IDENTITY_M3.concat())?);
        let zero3 = tape.constant(Tensor::from_vec(vec![0.0; 3]));
        rots.push(ident);
        pos.push(zero3);
        rest.push(zero3);
        for j in 1..N_JOINTS {
            let p = self.joint_parent[j] as usize;
            let f = factor(tape, &self.len_map[j])?;
            let off_c = tape.constant(Tensor::from_vec(self.joint_offset[j].to_vec()));
            let off = tape.scale_by(off_c, f)?;
            // Rest chain accumulates unrotated offsets.
            let r_rest = tape.add(rest[p], off)?;
            rest.push(r_rest);
            // Posed: offset rotated by the parent's global rotation.
            let off_row = tape.reshape(off, vec![1, 3])?;
            let rp_t = transpose3_var(tape, rots[p])?;
            let off_rot = tape.matmul(off_row, rp_t)?;
            let off_rot = tape.reshape(off_rot, vec![3])?;
            let c = tape.add(pos[p], off_rot)?;
            pos.push(c);
            let th = tape.slice(theta, 3 * (j - 1), 3)?;
            let local = rodrigues_var(tape, th)?;
            let r = tape.matmul(rots[p], local)?;
            rots.push(r);
        }

        // Skinning: accumulate sum_j w_ij * A_j(v) with
        // A_j(x) = R_j S_j (x - rest_j) + pos_j.
        let verts_c = tape.constant(Tensor::new(
            vec![v, 3],
            self.verts.iter().flatten().copied().collect(),
        )?);
        let mut acc = tape.constant(Tensor::zeros(vec![v, 3]));
        for j in 0..N_JOINTS {
            let wcol: Vec<f64> = {
                let mut col = vec![0.0; v];
                for (vi, row) in self.weights.iter().enumerate() {
                    for (jj, w) in row {
                        if *jj == j {
                            col[vi] = *w;
                        }
                    }
                }
                col
            };
            if wcol.iter().all(|w| *w == 0.0) {
                continue;
            }
            let ws = factor(tape, &self.width_map[j])?;
            let ls = factor(tape, &self.stretch_map[j])?;
            let zero = tape.scalar(0.0);
            let sdiag = tape.flat_concat(&[ws, zero, zero, zero, ls, zero, zero, zero, ws])?;
            let smat = tape.reshape(sdiag, vec![3, 3])?;

            let rest_neg = tape.neg(rest[j]);
            let x = tape.add_row(verts_c, rest_neg)?;
            let x = tape.matmul(x, smat)?;
            let rt = transpose3_var(tape, rots[j])?;
            let x = tape.matmul(x, rt)?;
            let x = tape.add_row(x, pos[j])?;
            let wvar = tape.constant(Tensor::from_vec(wcol));
            let contrib = tape.mul_col(x, wvar)?;
            acc = tape.add(acc, contrib)?;
        }

        let joints_flat = tape.flat_concat(&pos)?;
        let joints = tape.reshape(joints_flat, vec![N_JOINTS, 3])?;
        Ok(HandVars { verts: acc, joints })
    }

    /// Convenience: skinned vertices without gradients.
    pub fn skin_plain(&self, beta: &[f64], theta: &[f64]) -> Result<Vec<V3>, HoiError> {
        let mut tape = Tape::new();
        let b = tape.constant(Tensor::from_vec(beta.to_vec()));
        let t = tape.constant(Tensor::from_vec(theta.to_vec()));
        let hv = self.skin(&mut tape, b, t)?;
        Ok(tape
            .value(hv.verts)
            .data()
            .chunks(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect())
    }

    // ---- asset serialization ----

    pub fn to_asset_string(&self) -> String {
        let mut s = String::new();
        s.push_str("handproxy v1\n");
        s.push_str("# joint <id> <parent> <ox> <oy> <oz> | len[10] | stretch[10] | width[10]\n");
        s.push_str(&format!("joints {}\n", N_JOINTS));
        for j in 0..N_JOINTS {
            let o = self.joint_offset[j];
            s.push_str(&format!(
                "joint {} {} {} {} {} | {} | {} | {}\n",
                j,
                self.joint_parent[j],
                fmt(o[0]),
                fmt(o[1]),
                fmt(o[2]),
                fmt_map(&self.len_map[j]),
                fmt_map(&self.stretch_map[j]),
                fmt_map(&self.width_map[j]),
            ));
        }
        s.push_str("# vert <x> <y> <z> <u> <v> <n_weights> (<joint> <w>)*\n");
        s.push_str(&format!("verts {}\n", self.verts.len()));
        for (i, v) in self.verts.iter().enumerate() {
            let uv = self.uv[i];
            let mut line = format!(
                "vert {} {} {} {} {} {}",
                fmt(v[0]),
                fmt(v[1]),
                fmt(v[2]),
                fmt(uv[0]),
                fmt(uv[1]),
                self.weights[i].len()
            );
            for (j, w) in &self.weights[i] {
                line.push_str(&format!(" {} {}", j, fmt(*w)));
            }
            line.push('\n');
            s.push_str(&line);
        }
        s.push_str(&format!("faces {}\n", self.faces.len()));
        for f in &self.faces {
            s.push_str(&format!("face {} {} {}\n", f[0], f[1], f[2]));
        }
        s
    }

    pub fn from_asset_str(text: &str) -> Result<Self, HoiError> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| bad("empty asset"))?;
        if header != "handproxy v1" {
            return Err(bad(&format!("unknown header {header:?}")));
        }
        let jline = lines.next().ok_or_else(|| bad("missing joints"))?;
        let njoints: usize = field_after(jline, "joints")?;
        if njoints != N_JOINTS {
            return Err(bad(&format!("expected {N_JOINTS} joints, got {njoints}")));
        }
        let mut joint_parent = vec![0i32; njoints];
        let mut joint_offset = vec![[0.0; 3]; njoints];
        let mut len_map = vec![[0.0; BETA_DIM]; njoints];
        let mut stretch_map = vec![[0.0; BETA_DIM]; njoints];
        let mut width_map = vec![[0.0; BETA_DIM]; njoints];
        for _ in 0..njoints {
            let line = lines.next().ok_or_else(|| bad("truncated joints"))?;
            let (head, maps) = line.split_once('|').ok_or_else(|| bad("joint line"))?;
            let toks: Vec<&str> = head.split_whitespace().collect();
            if toks.len() != 6 || toks[0] != "joint" {
                return Err(bad(&format!("joint line {line:?}")));
            }
            let id: usize = toks[1].parse().map_err(|_| bad("joint id"))?;
            joint_parent[id] = toks[2].parse().map_err(|_| bad("joint parent"))?;
            for k in 0..3 {
                joint_offset[id][k] = toks[3 + k].parse().map_err(|_| bad("joint offset"))?;
            }
            let parts: Vec<&str> = maps.split('|').collect();
            if parts.len() != 3 {
                return Err(bad("joint maps"));
            }
            len_map[id] = parse_map(parts[0])?;
            stretch_map[id] = parse_map(parts[1])?;
            width_map[id] = parse_map(parts[2])?;
        }
        let vline = lines.next().ok_or_else(|| bad("missing verts"))?;
        let nverts: usize = field_after(vline, "verts")?;
        let mut verts = Vec::with_capacity(nverts);
        let mut uv = Vec::with_capacity(nverts);
        let mut weights = Vec::with_capacity(nverts);
        for _ in 0..nverts {
            let line = lines.next().ok_or_else(|| bad("truncated verts"))?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() < 7 || toks[0] != "vert" {
                return Err(bad(&format!("vert line {line:?}")));
            }
            let p: Vec<f64> = toks[1..6]
                .iter()
                .map(|t| t.parse().map_err(|_| bad("vert number")))
                .collect::<Result<_, _>>()?;
            verts.push([p[0], p[1], p[2]]);
            uv.push([p[3], p[4]]);
            let nw: usize = toks[6].parse().map_err(|_| bad("weight count"))?;
            if toks.len() != 7 + 2 * nw {
                return Err(bad("weight tokens"));
            }
            let mut row = Vec::with_capacity(nw);
            for k in 0..nw {
                let j: usize = toks[7 + 2 * k].parse().map_err(|_| bad("weight joint"))?;
                let w: f64 = toks[8 + 2 * k].parse().map_err(|_| bad("weight value"))?;
                row.push((j, w));
            }
            weights.push(row);
        }
        let fline = lines.next().ok_or_else(|| bad("missing faces"))?;
        let nfaces: usize = field_after(fline, "faces")?;
        let mut faces = Vec::with_capacity(nfaces);
        for _ in 0..nfaces {
            let line = lines.next().ok_or_else(|| bad("truncated faces"))?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 4 || toks[0] != "face" {
                return Err(bad(&format!("face line {line:?}")));
            }
            let f: Vec<usize> = toks[1..4]
                .iter()
                .map(|t| t.parse().map_err(|_| bad("face index")))
                .collect::<Result<_, _>>()?;
            if f.iter().any(|i| *i >= nverts) {
                return Err(bad("face index out of range"));
            }
            faces.push([f[0], f[1], f[2]]);
        }
        let proxy = HandProxy {
            joint_parent,
            joint_offset,
            len_map,
            stretch_map,
            width_map,
            verts,
            uv,
            weights,
            faces,
        };
        proxy.validate()?;
        Ok(proxy)
    }

    pub fn validate(&self) -> Result<(), HoiError> {
        for (i, row) in self.weights.iter().enumerate() {
            let sum: f64 = row.iter().map(|(_, w)| w).sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|(_, w)| *w < 0.0) {
                return Err(HoiError::Invalid(format!(
                    "skinning weights of vertex {i} sum to {sum}, must be a convex combination"
                )));
            }
        }
        Ok(())
    }
}

fn fmt(v: f64) -> String {
    // Shortest representation that round-trips f64.
    format!("{v}")
}

fn fmt_map(m: &BetaMap) -> String {
    m.iter().map(|v| fmt(*v)).collect::<Vec<_>>().join(" ")
}

fn parse_map(s: &str) -> Result<BetaMap, HoiError> {
    let vals: Vec<f64> = s
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| bad("map value")))
        .collect::<Result<_, _>>()?;
    if vals.len() != BETA_DIM {
        return Err(bad("map length"));
    }
    let mut out = [0.0; BETA_DIM];
    out.copy_from_slice(&vals);
    Ok(out)
}

fn field_after(line: &str, key: &str) -> Result<usize, HoiError> {
    let rest = line
        .strip_prefix(key)
        .ok_or_else(|| bad(&format!("expected {key:?} line, got {line:?}")))?;
    rest.trim().parse().map_err(|_| bad("count"))
}

fn bad(msg: &str) -> HoiError {
    HoiError::Format(format!("hand asset: {msg}"))
}

// ---- procedural construction ----

const FINGER_NAMES: [&str; 5] = ["thumb", "index", "middle", "ring", "pinky"];

fn build_proxy() -> HandProxy {
    let mut joint_parent = vec![-1i32];
    let mut joint_offset = vec![[0.0, 0.0, 0.0]];
    let mut len_map = vec![[0.0; BETA_DIM]];
    let mut stretch_map = vec![[0.0; BETA_DIM]];
    let mut width_map = vec![[0.0; BETA_DIM]];

    // Wrist: palm-sized stretch (beta 0 overall, 3 palm), width (0, 2).
    stretch_map[0] = beta_map(&[(0, 1.0), (3, 1.0)]);
    width_map[0] = beta_map(&[(0, 1.0), (2, 1.0)]);

    // Per-finger geometry: mcp offset from wrist, segment direction and
    // lengths (proximal, middle, distal).
    let mcp_off: [V3; 5] = [
        [-0.040, 0.028, 0.004], // thumb
        [-0.027, 0.088, 0.0],
        [-0.009, 0.092, 0.0],
        [0.009, 0.088, 0.0],
        [0.027, 0.080, 0.0],
    ];
    let dir: [V3; 5] = [
        geom::normalize([-0.55, 0.78, 0.15]),
        [0.0, 1.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 1.0, 0.0],
    ];
    let seg_len: [[f64; 3]; 5] = [
        [0.034, 0.028, 0.024],
        [0.036, 0.024, 0.020],
        [0.040, 0.026, 0.021],
        [0.036, 0.024, 0.020],
        [0.028, 0.019, 0.017],
    ];
    let radius: [f64; 5] = [0.0095, 0.008, 0.008, 0.0075, 0.007];

    for f in 0..N_FINGERS {
        let finger_beta = 4 + f; // beta 4..8: per-finger length
        // mcp: bone from the wrist scales with overall + palm size.
        joint_parent.push(0);
        joint_offset.push(mcp_off[f]);
        len_map.push(beta_map(&[(0, 1.0), (3, 1.0)]));
        stretch_map.push(beta_map(&[(0, 1.0), (1, 1.0), (finger_beta, 1.0)]));
        width_map.push(beta_map(&[(0, 1.0), (9, 1.0)]));
        // pip, dip: finger bones scale with overall + finger groups.
        for s in 0..2 {
            joint_parent.push((joint_parent.len() - 1) as i32);
            joint_offset.push(geom::scale(dir[f], seg_len[f][s]));
            len_map.push(beta_map(&[(0, 1.0), (1, 1.0), (finger_beta, 1.0)]));
            stretch_map.push(beta_map(&[(0, 1.0), (1, 1.0), (finger_beta, 1.0)]));
            width_map.push(beta_map(&[(0, 1.0), (9, 1.0)]));
        }
    }
    debug_assert_eq!(joint_parent.len(), N_JOINTS);

    let mut verts: Vec<V3> = Vec::new();
    let mut uv: Vec<[f64; 2]> = Vec::new();
    let mut weights: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();

    // Palm: two 4x4 grids (front z = +t, back z = -t) stitched at the rim.
    let palm_half_thick = 0.013;
    let xs = [-0.041, -0.0135, 0.0135, 0.041];
    let ys = [-0.012, 0.022, 0.056, 0.090];
    let mut grid_idx = [[[0usize; 4]; 4]; 2];
    for (side, z) in [(0usize, palm_half_thick), (1usize, -palm_half_thick)] {
        for (yi, y) in ys.iter().enumerate() {
            for (xi, x) in xs.iter().enumerate() {
                grid_idx[side][yi][xi] = verts.len();
                verts.push([*x, *y, z]);
                uv.push(uv_for([*x, *y, z]));
                // Knuckle row leans toward the nearest mcp joint.
                if yi == 3 {
                    let near = nearest_mcp(*x);
                    weights.push(vec![(0, 0.6), (near, 0.4)]);
                } else {
                    weights.push(vec![(0, 1.0)]);
                }
            }
        }
    }
    for side in 0..2 {
        for yi in 0..3 {
            for xi in 0..3 {
                let a = grid_idx[side][yi][xi];
                let b = grid_idx[side][yi][xi + 1];
                let c = grid_idx[side][yi + 1][xi];
                let d = grid_idx[side][yi + 1][xi + 1];
                if side == 0 {
                    faces.push([a, b, d]);
                    faces.push([a, d, c]);
                } else {
                    faces.push([a, d, b]);
                    faces.push([a, c, d]);
                }
            }
        }
    }
    // Rim stitching around the palm boundary.
    let rim: Vec<(usize, usize)> = {
        let mut r = Vec::new();
        for xi in 0..3 {
            r.push((0, xi));
        }
        for yi in 0..3 {
            r.push((yi, 3));
        }
        for xi in (1..4).rev() {
            r.push((3, xi));
        }
        for yi in (1..4).rev() {
            r.push((yi, 0));
        }
        r.iter().map(|(a, b)| (*a, *b)).collect()
    };
    for k in 0..rim.len() {
        let (y0, x0) = rim[k];
        let (y1, x1) = rim[(k + 1) % rim.len()];
        let f0 = grid_idx[0][y0][x0];
        let f1 = grid_idx[0][y1][x1];
        let b0 = grid_idx[1][y0][x0];
        let b1 = grid_idx[1][y1][x1];
        faces.push([f0, f1, b1]);
        faces.push([f0, b1, b0]);
    }

    // Fingers: three rings per segment plus a fingertip.
    const RING: usize = 8;
    let ring_ts = [0.12, 0.5, 0.88];
    for f in 0..N_FINGERS {
        let mcp = 1 + 3 * f;
        // Joint chain rest positions.
        let c_mcp = mcp_off[f];
        let c_pip = geom::add(c_mcp, geom::scale(dir[f], seg_len[f][0]));
        let c_dip = geom::add(c_pip, geom::scale(dir[f], seg_len[f][1]));
        let c_tip = geom::add(c_dip, geom::scale(dir[f], seg_len[f][2]));
        let chain = [c_mcp, c_pip, c_dip, c_tip];
        let mut prev_ring: Option<Vec<usize>> = None;
        for seg in 0..3 {
            let j = mcp + seg;
            let child = if seg < 2 { j + 1 } else { usize::MAX };
            for t in ring_ts {
                let center = geom::add(
                    geom::scale(chain[seg], 1.0 - t),
                    geom::scale(chain[seg + 1], t),
                );
                let mut ring_ids = Vec::with_capacity(RING);
                for k in 0..RING {
                    let ang = 2.0 * std::f64::consts::PI * k as f64 / RING as f64;
                    let r = radius[f] * taper(seg, t);
                    let p = geom::add(center, [r * ang.cos(), 0.0, r * ang.sin()]);
                    ring_ids.push(verts.len());
                    verts.push(p);
                    uv.push(uv_for(p));
                    // Blend toward the child joint near the segment's end.
                    if t > 0.8 && child != usize::MAX {
                        weights.push(vec![(j, 0.6), (child, 0.4)]);
                    } else {
                        weights.push(vec![(j, 1.0)]);
                    }
                }
                if let Some(prev) = prev_ring {
                    stitch_rings(&mut faces, &prev, &ring_ids);
                }
                prev_ring = Some(ring_ids);
            }
        }
        // Fingertip fan.
        let tip_id = verts.len();
        verts.push(c_tip);
        uv.push(uv_for(c_tip));
        weights.push(vec![(mcp + 2, 1.0)]);
        let last = prev_ring.expect("finger has rings");
        for k in 0..RING {
            faces.push([last[k], last[(k + 1) % RING], tip_id]);
        }
    }

    let proxy = HandProxy {
        joint_parent,
        joint_offset,
        len_map,
        stretch_map,
        width_map,
        verts,
        uv,
        weights,
        faces,
    };
    proxy.validate().expect("procedural proxy is valid");
    let _ = FINGER_NAMES;
    proxy
}

fn beta_map(entries: &[(usize, f64)]) -> BetaMap {
    let mut m = [0.0; BETA_DIM];
    for (i, v) in entries {
        m[*i] = *v;
    }
    m
}

fn nearest_mcp(x: f64) -> usize {
    // mcp joint ids: thumb 1, index 4, middle 7, ring 10, pinky 13
    let xs = [-0.040, -0.027, -0.009, 0.009, 0.027];
    let mut best = 0;
    for (i, cx) in xs.iter().enumerate() {
        if (x - cx).abs() < (x - xs[best]).abs() {
            best = i;
        }
    }
    1 + 3 * best
}

fn taper(seg: usize, t: f64) -> f64 {
    // Fingers thin toward the tip.
    let base = match seg {
        0 => 1.0,
        1 => 0.9,
        _ => 0.8,
    };
    base * (1.0 - 0.08 * t)
}

fn uv_for(p: V3) -> [f64; 2] {
    let side = if p[2] < -1e-9 { 0.5 } else { 0.0 };
    let u = (0.25 + p[0] / 0.3).clamp(0.02, 0.48) + side;
    let v = (p[1] / 0.25 + 0.15).clamp(0.0, 1.0);
    [u, v]
}

fn stitch_rings(faces: &mut Vec<[usize; 3]>, a: &[usize], b: &[usize]) {
    let n = a.len();
    for k in 0..n {
        let k1 = (k + 1) % n;
        faces.push([a[k], b[k], b[k1]]);
        faces.push([a[k], b[k1], a[k1]]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use diffcore::{check::grad_check_coords, ParamSet};

    #[test]
    fn proxy_has_expected_structure() {
        let p = HandProxy::default_proxy();
        assert_eq!(p.joint_parent.len(), N_JOINTS);
        let v = p.vertex_count();
        assert!((300..500).contains(&v), "vertex count {v}");
        assert!(p.face_count() > 500);
        p.validate().unwrap();
    }

    #[test]
    fn zero_articulation_reproduces_rest_mesh_exactly() {
        let p = HandProxy::default_proxy();
        let skinned = p.skin_plain(&[0.0; BETA_DIM], &[0.0; THETA_DIM]).unwrap();
        for (s, r) in skinned.iter().zip(p.verts.iter()) {
            for c in 0..3 {
                assert!((s[c] - r[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_beta_scales_interjoint_distances() {
        let p = HandProxy::default_proxy();
        let theta = [0.0; THETA_DIM];
        let mut beta = [0.0; BETA_DIM];
        beta[0] = 1.0; // overall: every bone map includes component 0
        let j0 = p.fk(&[0.0; BETA_DIM], &theta, None);
        let j1 = p.fk(&beta, &theta, None);
        let expect = (BETA_GAIN).exp();
        for j in 1..N_JOINTS {
            let parent = p.joint_parent[j] as usize;
            let d0 = geom::norm(geom::sub(j0[j], j0[parent]));
            let d1 = geom::norm(geom::sub(j1[j], j1[parent]));
            assert!((d1 / d0 - expect).abs() < 1e-9, "joint {j}: {}", d1 / d0);
        }
    }

    #[test]
    fn finger_beta_scales_only_that_finger() {
        let p = HandProxy::default_proxy();
        let theta = [0.0; THETA_DIM];
        let mut beta = [0.0; BETA_DIM];
        beta[5] = 2.0; // index finger
        let j0 = p.fk(&[0.0; BETA_DIM], &theta, None);
        let j1 = p.fk(&beta, &theta, None);
        // Index pip (joint 5) moved; pinky dip (joint 15) did not.
        assert!(geom::norm(geom::sub(j1[5], j0[5])) > 1e-4);
        assert!(geom::norm(geom::sub(j1[15], j0[15])) < 1e-12);
    }

    #[test]
    fn articulation_bends_the_fingertip() {
        let p = HandProxy::default_proxy();
        let mut theta = [0.0; THETA_DIM];
        // Index mcp is joint 4 -> theta block 3 (joints are 1-based on theta).
        theta[3 * 3] = 1.2; // bend about x
        let rest = p.skin_plain(&[0.0; BETA_DIM], &[0.0; THETA_DIM]).unwrap();
        let bent = p.skin_plain(&[0.0; BETA_DIM], &theta).unwrap();
        let moved = rest
            .iter()
            .zip(bent.iter())
            .map(|(a, b)| geom::norm(geom::sub(*a, *b)))
            .fold(0.0, f64::max);
        assert!(moved > 0.02, "max vertex move {moved}");
    }

    #[test]
    fn skinning_gradients_match_finite_differences() {
        let p = HandProxy::default_proxy();
        let mut params = ParamSet::new();
        let mut theta = vec![0.15; THETA_DIM];
        theta[4] = -0.3;
        params.push("beta", Tensor::from_vec(vec![0.2; BETA_DIM]));
        params.push("theta", Tensor::from_vec(theta));

        let eval = |ps: &ParamSet, tape: &mut Tape| -> Result<(Vec<Var>, Var), HoiError> {
            let leaves = ps.leaves(tape);
            let hv = p.skin(tape, leaves[0], leaves[1])?;
            // Weighted vertex sum: a scalar touching every vertex coordinate.
            let probe: Vec<f64> = (0..tape.value(hv.verts).numel())
                .map(|i| ((i % 7) as f64 - 3.0) * 0.21)
                .collect();
            let pv = tape.constant(Tensor::new(
                tape.value(hv.verts).shape().to_vec(),
                probe,
            )?);
            let prod = tape.mul(hv.verts, pv)?;
            let loss = tape.sum_all(prod);
            Ok((leaves, loss))
        };

        let mut tape = Tape::new();
        let (leaves, loss) = eval(&params, &mut tape).unwrap();
        tape.backward(loss).unwrap();
        let ad: Vec<Vec<f64>> = leaves
            .iter()
            .map(|l| tape.grad(*l).unwrap().to_vec())
            .collect();
        // Spot-check a spread of coordinates across both parameters.
        let coords: Vec<(usize, usize)> = (0..BETA_DIM)
            .map(|i| (0, i))
            .chain((0..THETA_DIM).step_by(4).map(|i| (1, i)))
            .collect();
        let err = grad_check_coords(&params, &ad, 1e-6, &coords, &mut |ps| {
            let mut t = Tape::new();
            let (_, loss) = eval(ps, &mut t).map_err(|e| match e {
                HoiError::Diff(d) => d,
                other => diffcore::DiffError::Invalid(other.to_string()),
            })?;
            Ok(t.value(loss).item())
        })
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn asset_round_trips() {
        let p = HandProxy::default_proxy();
        let text = p.to_asset_string();
        let back = HandProxy::from_asset_str(&text).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn bundled_asset_matches_procedural_build() {
        let p = HandProxy::default_proxy();
        let b = HandProxy::bundled();
        assert_eq!(p, b);
    }

    #[test]
    fn skin_rejects_non_finite_articulation() {
        let p = HandProxy::default_proxy();
        let mut tape = Tape::new();
        let mut theta = vec![0.0; THETA_DIM];
        theta[7] = f64::NAN;
        let b = tape.constant(Tensor::from_vec(vec![0.0; BETA_DIM]));
        let t = tape.constant(Tensor::from_vec(theta));
        assert!(p.skin(&mut tape, b, t).is_err());
    }
}
