//! Small fixed-size 3D math used across the scene, renderer and pipeline,
//! plus the tape-side rotation construction the pose parameters are
//! optimized through.
//!
//! Conventions: matrices are row-major `[[f64; 3]; 3]`; a [`RigidTransform`]
//! maps points from its source frame to its target frame as `R x + t`.
//! Rotations are parameterized as axis-angle (exponential map) everywhere a
//! parameter is optimized.

use diffcore::{CustomVjp, DiffError, Tape, Tensor, Var};
use rand::Rng;

pub type V3 = [f64; 3];
pub type M3 = [[f64; 3]; 3];

pub fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: V3, b: V3) -> V3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: V3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: V3) -> V3 {
    let n = norm(a);
    if n == 0.0 {
        [0.0, 0.0, 0.0]
    } else {
        scale(a, 1.0 / n)
    }
}

pub const IDENTITY_M3: M3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat_vec(m: &M3, v: V3) -> V3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &M3, b: &M3) -> M3 {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c] + a[r][2] * b[2][c];
        }
    }
    out
}

pub fn mat_transpose(m: &M3) -> M3 {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = m[c][r];
        }
    }
    out
}

pub fn mat_det(m: &M3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// sin(t)/t and (1-cos(t))/t^2 as smooth functions of t^2, series-switched
/// near zero so both the value and the derivative stay accurate where the
/// closed forms cancel.
pub fn sinc2(x: f64) -> f64 {
    if x < 1e-4 {
        1.0 - x / 6.0 + x * x / 120.0 - x * x * x / 5040.0
    } else {
        let t = x.sqrt();
        t.sin() / t
    }
}

pub fn sinc2_deriv(x: f64) -> f64 {
    if x < 1e-4 {
        -1.0 / 6.0 + x / 60.0 - x * x / 1680.0
    } else {
        let t = x.sqrt();
        (t * t.cos() - t.sin()) / (2.0 * t * t * t)
    }
}

pub fn cosc2(x: f64) -> f64 {
    if x < 1e-4 {
        0.5 - x / 24.0 + x * x / 720.0 - x * x * x / 40320.0
    } else {
        (1.0 - x.sqrt().cos()) / x
    }
}

pub fn cosc2_deriv(x: f64) -> f64 {
    if x < 1e-4 {
        -1.0 / 24.0 + x / 360.0 - x * x / 13440.0
    } else {
        let t = x.sqrt();
        (t * t.sin() / 2.0 - (1.0 - t.cos())) / (x * x)
    }
}

/// Rodrigues: axis-angle (magnitude = radians) to rotation matrix.
pub fn axis_angle_to_mat(r: V3) -> M3 {
    let x2 = dot(r, r);
    let a = sinc2(x2);
    let b = cosc2(x2);
    let (x, y, z) = (r[0], r[1], r[2]);
    [
        [1.0 - b * (y * y + z * z), -a * z + b * x * y, a * y + b * x * z],
        [a * z + b * x * y, 1.0 - b * (x * x + z * z), -a * x + b * y * z],
        [-a * y + b * x * z, a * x + b * y * z, 1.0 - b * (x * x + y * y)],
    ]
}

/// Matrix logarithm for rotations. Stable away from the pi ambiguity; at
/// exactly pi the axis sign is resolved from the largest diagonal entry.
pub fn mat_to_axis_angle(m: &M3) -> V3 {
    let tr = (m[0][0] + m[1][1] + m[2][2]).clamp(-1.0, 3.0);
    let cos_t = ((tr - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos_t.acos();
    let skew = [
        m[2][1] - m[1][2],
        m[0][2] - m[2][0],
        m[1][0] - m[0][1],
    ];
    if theta < 1e-7 {
        return scale(skew, 0.5);
    }
    if theta < std::f64::consts::PI - 1e-4 {
        return scale(skew, theta / (2.0 * theta.sin()));
    }
    // Near pi: axis from the symmetric part, sign from the skew part.
    let mut axis = [0.0; 3];
    let d = [m[0][0], m[1][1], m[2][2]];
    let k = if d[0] >= d[1] && d[0] >= d[2] {
        0
    } else if d[1] >= d[2] {
        1
    } else {
        2
    };
    axis[k] = ((d[k] + 1.0) / 2.0).max(0.0).sqrt();
    for j in 0..3 {
        if j != k {
            axis[j] = (m[k][j] + m[j][k]) / (4.0 * axis[k]);
        }
    }
    let axis = normalize(axis);
    let axis = if dot(axis, skew) < 0.0 { scale(axis, -1.0) } else { axis };
    scale(axis, theta)
}

/// A rigid map `x -> R x + t` from a source frame to a target frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rot: M3,
    pub t: V3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform { rot: IDENTITY_M3, t: [0.0; 3] }
    }

    pub fn new(rot: M3, t: V3) -> Self {
        RigidTransform { rot, t }
    }

    pub fn from_axis_angle(r: V3, t: V3) -> Self {
        RigidTransform { rot: axis_angle_to_mat(r), t }
    }

    pub fn apply(&self, p: V3) -> V3 {
        add(mat_vec(&self.rot, p), self.t)
    }

    pub fn apply_vec(&self, v: V3) -> V3 {
        mat_vec(&self.rot, v)
    }

    pub fn inverse(&self) -> Self {
        let rt = mat_transpose(&self.rot);
        RigidTransform { rot: rt, t: scale(mat_vec(&rt, self.t), -1.0) }
    }

    /// `self.compose(other)` applies `other` first: `(self ∘ other)(x)`.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        RigidTransform {
            rot: mat_mul(&self.rot, &other.rot),
            t: add(mat_vec(&self.rot, other.t), self.t),
        }
    }
}

/// Rotation drawn from the Haar (uniform) measure on SO(3), via a uniform
/// unit quaternion from four normal deviates.
pub fn sample_uniform_rotation(rng: &mut impl Rng) -> M3 {
    loop {
        let q: [f64; 4] = [
            normal_deviate(rng),
            normal_deviate(rng),
            normal_deviate(rng),
            normal_deviate(rng),
        ];
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if n < 1e-12 {
            continue;
        }
        let [w, x, y, z] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
        return [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ];
    }
}

/// Box-Muller; keeps the dependency surface to `rand::Rng` alone.
fn normal_deviate(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// ---- tape-side rotation construction ----

struct ElemFnVjp {
    deriv: fn(f64) -> f64,
}

impl CustomVjp for ElemFnVjp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f64],
        grads: &mut [Option<&mut Vec<f64>>],
    ) {
        if let Some(buf) = grads[0].as_mut() {
            for ((b, g), x) in buf.iter_mut().zip(grad_out.iter()).zip(inputs[0].data().iter()) {
                *b += *g * (self.deriv)(*x);
            }
        }
    }
}

fn elem_custom(
    tape: &mut Tape,
    a: Var,
    f: fn(f64) -> f64,
    deriv: fn(f64) -> f64,
) -> Result<Var, DiffError> {
    let t = tape.value(a);
    let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect())?;
    tape.custom(&[a], out, Box::new(ElemFnVjp { deriv }))
}

/// Build a 3x3 rotation matrix on the tape from an axis-angle `[3]` var.
/// Smooth at the identity, so poses initialized at zero still get useful
/// gradients.
pub fn rodrigues_var(tape: &mut Tape, aa: Var) -> Result<Var, DiffError> {
    let sq = tape.square(aa);
    let theta2 = tape.sum_all(sq);
    let theta2 = tape.reshape(theta2, vec![1])?;
    let a = elem_custom(tape, theta2, sinc2, sinc2_deriv)?;
    let b = elem_custom(tape, theta2, cosc2, cosc2_deriv)?;

    let x = tape.slice(aa, 0, 1)?;
    let y = tape.slice(aa, 1, 1)?;
    let z = tape.slice(aa, 2, 1)?;
    let one = tape.constant(Tensor::from_vec(vec![1.0]));

    let mul3 = |tape: &mut Tape, p: Var, q: Var, r: Var| -> Result<Var, DiffError> {
        let pq = tape.mul(p, q)?;
        tape.mul(pq, r)
    };
    // Diagonal: 1 - b * (sum of the other two squares)
    let xx = tape.mul(x, x)?;
    let yy = tape.mul(y, y)?;
    let zz = tape.mul(z, z)?;
    let diag = |tape: &mut Tape, s1: Var, s2: Var| -> Result<Var, DiffError> {
        let s = tape.add(s1, s2)?;
        let bs = tape.mul(b, s)?;
        tape.sub(one, bs)
    };
    let r00 = diag(tape, yy, zz)?;
    let r11 = diag(tape, xx, zz)?;
    let r22 = diag(tape, xx, yy)?;

    let az = tape.mul(a, z)?;
    let ay = tape.mul(a, y)?;
    let ax = tape.mul(a, x)?;
    let bxy = mul3(tape, b, x, y)?;
    let bxz = mul3(tape, b, x, z)?;
    let byz = mul3(tape, b, y, z)?;

    let r01 = tape.sub(bxy, az)?;
    let r02 = tape.add(ay, bxz)?;
    let r10 = tape.add(az, bxy)?;
    let r12 = tape.sub(byz, ax)?;
    let r20 = tape.sub(bxz, ay)?;
    let r21 = tape.add(ax, byz)?;

    let flat = tape.flat_concat(&[r00, r01, r02, r10, r11, r12, r20, r21, r22])?;
    tape.reshape(flat, vec![3, 3])
}

/// Transpose a `[3,3]` var (nine slices re-concatenated).
pub fn transpose3_var(tape: &mut Tape, m: Var) -> Result<Var, DiffError> {
    let mut cells = Vec::with_capacity(9);
    for c in 0..3 {
        for r in 0..3 {
            cells.push(tape.slice(m, r * 3 + c, 1)?);
        }
    }
    let flat = tape.flat_concat(&cells)?;
    tape.reshape(flat, vec![3, 3])
}

/// points `[N,3]` -> `points @ R^T + t`, i.e. the rigid map applied to rows.
pub fn transform_points_var(
    tape: &mut Tape,
    points: Var,
    rot: Var,
    t: Var,
) -> Result<Var, DiffError> {
    let rt = transpose3_var(tape, rot)?;
    let rotated = tape.matmul(points, rt)?;
    tape.add_row(rotated, t)
}
