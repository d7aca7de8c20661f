//! The Wengert tape: eager forward evaluation with recorded operations,
//! replayed in reverse for gradient accumulation.

use crate::kernels;
use crate::tensor::Tensor;
use crate::{sigmoid, softplus, tree_sum, DiffError};

/// Handle to a value on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// A fused operation with a hand-written backward pass.
///
/// `grads[i]` is `Some` when input `i` needs a gradient; implementations
/// must accumulate (`+=`) into the provided slices, never overwrite.
pub trait CustomVjp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
        grads: &mut [Option<&mut Vec<f64>>],
    );
}

enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Abs(Var),
    Sin(Var),
    Cos(Var),
    Square(Var),
    Softplus(Var),
    Sigmoid(Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    ScaleByScalar { a: Var, s: Var },
    AddRow { a: Var, bias: Var, m: usize, n: usize },
    AddChan { a: Var, bias: Var, c: usize, l: usize },
    MulCol { a: Var, col: Var, m: usize, n: usize },
    RepeatRows { a: Var, m: usize, n: usize, times: usize },
    SumAll(Var),
    MeanAll(Var),
    SumRows { a: Var, m: usize, n: usize },
    CumsumRowsExclusive { a: Var, m: usize, n: usize },
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    ConcatCols { parts: Vec<Var>, m: usize, widths: Vec<usize> },
    FlatConcat { parts: Vec<Var> },
    Slice { a: Var, start: usize, len: usize },
    Reshape(Var),
    Conv3x3 { input: Var, weight: Var, bias: Var, cin: usize, cout: usize, h: usize, w: usize },
    AvgPool2 { a: Var, c: usize, h: usize, w: usize },
    Upsample2 { a: Var, c: usize, h: usize, w: usize },
    Custom { inputs: Vec<Var>, vjp: Box<dyn CustomVjp> },
}

struct Node {
    op: Op,
    value: Tensor,
    requires: bool,
}

/// Ordered record of primitive operations. Each tape is owned by a single
/// control flow; build a fresh tape per optimization step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    swept: bool,
}

impl Tape {
    pub fn new() -> Self {
        tune_allocator();
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires: bool) -> Var {
        self.nodes.push(Node { op, value, requires });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    /// A differentiable leaf (parameter). Gradients accumulate here.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// A constant input; no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` with respect to `v`, if any was
    /// accumulated there.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---- elementwise binary ----

    fn binary_elem(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64 + Sync,
        ctor: impl Fn(Var, Var) -> Op,
    ) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(DiffError::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(ta.shape().to_vec());
        kernels::map_binary(ta.data(), tb.data(), out.data_mut(), f);
        let requires = self.req(a) || self.req(b);
        Ok(self.push(ctor(a, b), out, requires))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary_elem("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary_elem("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary_elem("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary_elem("div", a, b, |x, y| x / y, Op::Div)
    }

    // ---- elementwise unary ----

    fn unary_elem(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64 + Sync,
        ctor: impl Fn(Var) -> Op,
    ) -> Var {
        let ta = self.value(a);
        let mut out = Tensor::zeros(ta.shape().to_vec());
        kernels::map_unary(ta.data(), out.data_mut(), f);
        let requires = self.req(a);
        self.push(ctor(a), out, requires)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary_elem(a, |x| -x, Op::Neg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary_elem(a, f64::exp, Op::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary_elem(a, f64::ln, Op::Ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary_elem(a, f64::sqrt, Op::Sqrt)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary_elem(a, f64::abs, Op::Abs)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary_elem(a, f64::sin, Op::Sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary_elem(a, f64::cos, Op::Cos)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary_elem(a, |x| x * x, Op::Square)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary_elem(a, softplus, Op::Softplus)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary_elem(a, sigmoid, Op::Sigmoid)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let mut out = Tensor::zeros(ta.shape().to_vec());
        kernels::map_unary(ta.data(), out.data_mut(), |x| x + c);
        let requires = self.req(a);
        self.push(Op::AddScalar(a), out, requires)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let mut out = Tensor::zeros(ta.shape().to_vec());
        kernels::map_unary(ta.data(), out.data_mut(), |x| x * c);
        let requires = self.req(a);
        self.push(Op::MulScalar(a, c), out, requires)
    }

    /// Multiply a whole tensor by a scalar variable (shape `[]`).
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var, DiffError> {
        if self.value(s).numel() != 1 {
            return Err(DiffError::Invalid("scale_by expects scalar".into()));
        }
        let sv = self.value(s).data()[0];
        let ta = self.value(a);
        let mut out = Tensor::zeros(ta.shape().to_vec());
        kernels::map_unary(ta.data(), out.data_mut(), |x| x * sv);
        let requires = self.req(a) || self.req(s);
        Ok(self.push(Op::ScaleByScalar { a, s }, out, requires))
    }

    // ---- broadcasts ----

    /// `[m,n] + [n]`, the bias pattern.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(bias).shape().to_vec());
        let (m, n) = as_matrix(&sa)?;
        if self.value(bias).numel() != n {
            return Err(DiffError::ShapeMismatch { op: "add_row", lhs: sa, rhs: sb });
        }
        let ta = self.value(a).data();
        let tb = self.value(bias).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ta[i * n..(i + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = arow[j] + tb[j];
            }
        }
        let requires = self.req(a) || self.req(bias);
        let t = Tensor::new(sa, out).expect("shape consistent");
        Ok(self.push(Op::AddRow { a, bias, m, n }, t, requires))
    }

    /// `[c, l] + [c]` broadcast over the trailing extent (channel bias).
    pub fn add_chan(&mut self, a: Var, bias: Var) -> Result<Var, DiffError> {
        let sa = self.value(a).shape().to_vec();
        let c = self.value(bias).numel();
        let numel = self.value(a).numel();
        if c == 0 || numel % c != 0 || sa.first() != Some(&c) {
            return Err(DiffError::ShapeMismatch {
                op: "add_chan",
                lhs: sa,
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let l = numel / c;
        let ta = self.value(a).data();
        let tb = self.value(bias).data();
        let mut out = vec![0.0; numel];
        for ch in 0..c {
            let b = tb[ch];
            for j in 0..l {
                out[ch * l + j] = ta[ch * l + j] + b;
            }
        }
        let requires = self.req(a) || self.req(bias);
        let t = Tensor::new(sa, out).expect("shape consistent");
        Ok(self.push(Op::AddChan { a, bias, c, l }, t, requires))
    }

    /// `[m,n] * [m]`: scale row `i` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var, DiffError> {
        let sa = self.value(a).shape().to_vec();
        let (m, n) = as_matrix(&sa)?;
        if self.value(col).numel() != m {
            return Err(DiffError::ShapeMismatch {
                op: "mul_col",
                lhs: sa,
                rhs: self.value(col).shape().to_vec(),
            });
        }
        let ta = self.value(a).data();
        let tc = self.value(col).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let s = tc[i];
            for j in 0..n {
                out[i * n + j] = ta[i * n + j] * s;
            }
        }
        let requires = self.req(a) || self.req(col);
        let t = Tensor::new(sa, out).expect("shape consistent");
        Ok(self.push(Op::MulCol { a, col, m, n }, t, requires))
    }

    /// `[m,n] -> [m*times, n]` repeating each row `times` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var, DiffError> {
        let sa = self.value(a).shape().to_vec();
        let (m, n) = as_matrix(&sa)?;
        let ta = self.value(a).data();
        let mut out = vec![0.0; m * times * n];
        for i in 0..m {
            let src = &ta[i * n..(i + 1) * n];
            for j in 0..times {
                out[(i * times + j) * n..(i * times + j + 1) * n].copy_from_slice(src);
            }
        }
        let requires = self.req(a);
        let t = Tensor::new(vec![m * times, n], out).expect("shape consistent");
        Ok(self.push(Op::RepeatRows { a, m, n, times }, t, requires))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = tree_sum(self.value(a).data());
        let requires = self.req(a);
        self.push(Op::SumAll(a), Tensor::scalar(s), requires)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = tree_sum(self.value(a).data()) / n as f64;
        let requires = self.req(a);
        self.push(Op::MeanAll(a), Tensor::scalar(s), requires)
    }

    /// `[m,n] -> [m]`, summing within each row (fixed pairwise order).
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let sa = self.value(a).shape().to_vec();
        let (m, n) = as_matrix(&sa)?;
        let ta = self.value(a).data();
        let mut out = vec![0.0; m];
        for i in 0..m {
            out[i] = tree_sum(&ta[i * n..(i + 1) * n]);
        }
        let requires = self.req(a);
        let t = Tensor::new(vec![m], out).expect("shape consistent");
        Ok(self.push(Op::SumRows { a, m, n }, t, requires))
    }

    /// Exclusive cumulative sum within each row:
    /// `out[i,j] = sum_{k<j} a[i,k]`.
    pub fn cumsum_rows_exclusive(&mut self, a: Var) -> Result<Var, DiffError> {
        let sa = self.value(a).shape().to_vec();
        let (m, n) = as_matrix(&sa)?;
        let ta = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..n {
                out[i * n + j] = acc;
                acc += ta[i * n + j];
            }
        }
        let requires = self.req(a);
        let t = Tensor::new(sa, out).expect("shape consistent");
        Ok(self.push(Op::CumsumRowsExclusive { a, m, n }, t, requires))
    }

    // ---- structural ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        let (m, k) = as_matrix(&sa)?;
        let (k2, n) = as_matrix(&sb)?;
        if k != k2 {
            return Err(DiffError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let requires = self.req(a) || self.req(b);
        let t = Tensor::new(vec![m, n], out).expect("shape consistent");
        Ok(self.push(Op::Matmul { a, b, m, k, n }, t, requires))
    }

    /// Concatenate `[m, w_i]` blocks side by side into `[m, sum(w_i)]`.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::Invalid("concat_cols of nothing".into()));
        }
        let mut m = 0usize;
        let mut widths = Vec::with_capacity(parts.len());
        for (idx, p) in parts.iter().enumerate() {
            let sp = self.value(*p).shape().to_vec();
            let (pm, pn) = as_matrix(&sp)?;
            if idx == 0 {
                m = pm;
            } else if pm != m {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![m],
                    rhs: vec![pm],
                });
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut off = 0usize;
        for (p, w) in parts.iter().zip(widths.iter()) {
            let td = self.value(*p).data();
            for i in 0..m {
                out[i * total + off..i * total + off + w].copy_from_slice(&td[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let requires = parts.iter().any(|p| self.req(*p));
        let t = Tensor::new(vec![m, total], out).expect("shape consistent");
        Ok(self.push(Op::ConcatCols { parts: parts.to_vec(), m, widths }, t, requires))
    }

    /// Concatenate flattened tensors end to end into a `[total]` vector.
    pub fn flat_concat(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::Invalid("flat_concat of nothing".into()));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).numel()).sum();
        let mut out = Vec::with_capacity(total);
        for p in parts {
            out.extend_from_slice(self.value(*p).data());
        }
        let requires = parts.iter().any(|p| self.req(*p));
        let t = Tensor::new(vec![total], out).expect("shape consistent");
        Ok(self.push(Op::FlatConcat { parts: parts.to_vec() }, t, requires))
    }

    /// Contiguous flat slice `[start, start+len)` of a tensor's data.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let ta = self.value(a);
        if start + len > ta.numel() {
            return Err(DiffError::Invalid(format!(
                "slice [{start}, {}) out of bounds for {} elements",
                start + len,
                ta.numel()
            )));
        }
        let out = Tensor::from_vec(ta.data()[start..start + len].to_vec());
        let requires = self.req(a);
        Ok(self.push(Op::Slice { a, start, len }, out, requires))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, DiffError> {
        let t = self.value(a).clone().reshaped(shape)?;
        let requires = self.req(a);
        Ok(self.push(Op::Reshape(a), t, requires))
    }

    // ---- image ops ----

    /// 3x3 same-padding convolution. `input` is `[cin,h,w]`, `weight`
    /// `[cout,cin,3,3]`, `bias` `[cout]`; output `[cout,h,w]`.
    pub fn conv3x3(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, DiffError> {
        let si = self.value(input).shape().to_vec();
        let sw = self.value(weight).shape().to_vec();
        if si.len() != 3 || sw.len() != 4 || sw[2] != 3 || sw[3] != 3 || sw[1] != si[0] {
            return Err(DiffError::ShapeMismatch { op: "conv3x3", lhs: si, rhs: sw });
        }
        let (cin, h, w) = (si[0], si[1], si[2]);
        let cout = sw[0];
        if self.value(bias).numel() != cout {
            return Err(DiffError::ShapeMismatch {
                op: "conv3x3 bias",
                lhs: vec![cout],
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; cout * h * w];
        kernels::conv3x3(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &mut out,
            cin,
            cout,
            h,
            w,
        );
        let requires = self.req(input) || self.req(weight) || self.req(bias);
        let t = Tensor::new(vec![cout, h, w], out).expect("shape consistent");
        Ok(self.push(Op::Conv3x3 { input, weight, bias, cin, cout, h, w }, t, requires))
    }

    /// 2x2 average pooling; extents must be even.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var, DiffError> {
        let sa = self.value(a).shape().to_vec();
        if sa.len() != 3 || sa[1] % 2 != 0 || sa[2] % 2 != 0 {
            return Err(DiffError::Invalid(format!("avg_pool2 on shape {sa:?}")));
        }
        let (c, h, w) = (sa[0], sa[1], sa[2]);
        let (oh, ow) = (h / 2, w / 2);
        let ta = self.value(a).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let base = ch * h * w + 2 * y * w + 2 * x;
                    out[ch * oh * ow + y * ow + x] =
                        0.25 * (ta[base] + ta[base + 1] + ta[base + w] + ta[base + w + 1]);
                }
            }
        }
        let requires = self.req(a);
        let t = Tensor::new(vec![c, oh, ow], out).expect("shape consistent");
        Ok(self.push(Op::AvgPool2 { a, c, h, w }, t, requires))
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2(&mut self, a: Var) -> Result<Var, DiffError> {
        let sa = self.value(a).shape().to_vec();
        if sa.len() != 3 {
            return Err(DiffError::Invalid(format!("upsample2 on shape {sa:?}")));
        }
        let (c, h, w) = (sa[0], sa[1], sa[2]);
        let (oh, ow) = (h * 2, w * 2);
        let ta = self.value(a).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    out[ch * oh * ow + y * ow + x] = ta[ch * h * w + (y / 2) * w + x / 2];
                }
            }
        }
        let requires = self.req(a);
        let t = Tensor::new(vec![c, oh, ow], out).expect("shape consistent");
        Ok(self.push(Op::Upsample2 { a, c, h, w }, t, requires))
    }

    /// Record a fused operation whose output was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor,
        vjp: Box<dyn CustomVjp>,
    ) -> Result<Var, DiffError> {
        for v in inputs {
            if v.0 >= self.nodes.len() {
                return Err(DiffError::NotOnTape(v.0));
            }
        }
        let requires = inputs.iter().any(|v| self.req(*v));
        Ok(self.push(Op::Custom { inputs: inputs.to_vec(), vjp }, output, requires))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Gradients of every
    /// gradient-requiring node accumulate in the tape; query leaves with
    /// [`Tape::grad`] afterwards. May be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<(), DiffError> {
        if self.swept {
            return Err(DiffError::Invalid("tape already swept".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(DiffError::NotOnTape(loss.0));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(DiffError::LossNotScalar(
                self.nodes[loss.0].value.shape().to_vec(),
            ));
        }
        self.swept = true;
        self.grads = Vec::with_capacity(self.nodes.len());
        self.grads.resize_with(self.nodes.len(), || None);
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires {
                continue;
            }
            let Some(gout) = self.grads[idx].take() else {
                continue;
            };
            self.dispatch_backward(idx, &gout);
            self.grads[idx] = Some(gout);
        }
        Ok(())
    }

    fn dispatch_backward(&mut self, idx: usize, gout: &[f64]) {
        // Field-disjoint borrows: node values are read through `self.nodes`
        // while gradient buffers move in and out of `self.grads`. No value
        // is ever copied on this path.
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let req = |v: Var| nodes[v.0].requires;
        let val = |v: Var| nodes[v.0].value.data();

        macro_rules! with_buf {
            ($v:expr, $body:expr) => {{
                let v = $v;
                if req(v) {
                    let mut buf = grads[v.0]
                        .take()
                        .unwrap_or_else(|| vec![0.0; nodes[v.0].value.numel()]);
                    #[allow(clippy::redundant_closure_call)]
                    ($body)(&mut buf);
                    grads[v.0] = Some(buf);
                }
            }};
        }

        match &nodes[idx].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                with_buf!(*a, |buf: &mut Vec<f64>| kernels::acc_unary(gout, buf, |g| g));
                with_buf!(*b, |buf: &mut Vec<f64>| kernels::acc_unary(gout, buf, |g| g));
            }
            Op::Sub(a, b) => {
                with_buf!(*a, |buf: &mut Vec<f64>| kernels::acc_unary(gout, buf, |g| g));
                with_buf!(*b, |buf: &mut Vec<f64>| kernels::acc_unary(gout, buf, |g| -g));
            }
            Op::Mul(a, b) => {
                with_buf!(*a, |buf: &mut Vec<f64>| kernels::acc_binary(
                    gout,
                    val(*b),
                    buf,
                    |g, y| g * y
                ));
                with_buf!(*b, |buf: &mut Vec<f64>| kernels::acc_binary(
                    gout,
                    val(*a),
                    buf,
                    |g, x| g * x
                ));
            }
            Op::Div(a, b) => {
                with_buf!(*a, |buf: &mut Vec<f64>| kernels::acc_binary(
                    gout,
                    val(*b),
                    buf,
                    |g, y| g / y
                ));
                with_buf!(*b, |buf: &mut Vec<f64>| {
                    let (av, bv) = (val(*a), val(*b));
                    for i in 0..buf.len() {
                        buf[i] -= gout[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::Neg(a) => {
                with_buf!(*a, |buf: &mut Vec<f64>| kernels::acc_unary(gout, buf, |g| -g));
            }
            Op::Exp(a) => {
                let out = nodes[idx].value.data();
                with_buf!(*a, |buf: &mut Vec<f64>| kernels::acc_binary(
                    gout,
                    out,
                    buf,
                    |g, y| g * y
                ));
            }
            Op::Ln(a) => {
                with_buf!(*a, |buf: &mut Vec<f64>| kernels::acc_binary(
                    gout,
                    val(*a),
                    buf,
                    |g, x| g / x
                ));
            }
            Op::Sqrt(a) => {
                let out = nodes[idx].value.data();
                with_buf!(*a, |buf: &mut Vec<f64>| kernels::acc_binary(
                    gout,
                    out,
                    buf,
                    |g, y| g / (2.0 * y)
                ));
            }
            Op::Abs(a) => {
                with_buf!(*a, |buf: &mut Vec<f64>| kernels::acc_binary(
                    gout,
                    val(*a),
                    buf,
                    |g, x| if x > 0.0 { g } else if x < 0.0 { -g } else { 0.0 }
                ));
            }
            Op::Sin(a) => {
                with_buf!(*a, |buf: &mut Vec<f64>| kernels::acc_binary(
                    gout,
                    val(*a),
                    buf,
                    |g, x| g * x.cos()
                ));
            }
            Op::Cos(a) => {
                with_buf!(*a, |buf: &mut Vec<f64>| kernels::acc_binary(
                    gout,
                    val(*a),
                    buf,
                    |g, x| -g * x.sin()
                ));
            }
            Op::Square(a) => {
                with_buf!(*a, |buf: &mut Vec<f64>| kernels::acc_binary(
                    gout,
                    val(*a),
                    buf,
                    |g, x| 2.0 * g * x
                ));
            }
            Op::Softplus(a) => {
                with_buf!(*a, |buf: &mut Vec<f64>| kernels::acc_binary(
                    gout,
                    val(*a),
                    buf,
                    |g, x| g * sigmoid(x)
                ));
            }
            Op::Sigmoid(a) => {
                let out = nodes[idx].value.data();
                with_buf!(*a, |buf: &mut Vec<f64>| kernels::acc_binary(
                    gout,
                    out,
                    buf,
                    |g, y| g * y * (1.0 - y)
                ));
            }
            Op::AddScalar(a) => {
                with_buf!(*a, |buf: &mut Vec<f64>| kernels::acc_unary(gout, buf, |g| g));
            }
            Op::MulScalar(a, c) => {
                let c = *c;
                with_buf!(*a, |buf: &mut Vec<f64>| kernels::acc_unary(
                    gout,
                    buf,
                    |g| g * c
                ));
            }
            Op::ScaleByScalar { a, s } => {
                let sv = val(*s)[0];
                with_buf!(*a, |buf: &mut Vec<f64>| kernels::acc_unary(
                    gout,
                    buf,
                    |g| g * sv
                ));
                with_buf!(*s, |buf: &mut Vec<f64>| buf[0] += tree_dot(gout, val(*a)));
            }
            Op::AddRow { a, bias, m, n } => {
                let (m, n) = (*m, *n);
                with_buf!(*a, |buf: &mut Vec<f64>| kernels::acc_unary(gout, buf, |g| g));
                with_buf!(*bias, |buf: &mut Vec<f64>| {
                    let mut col = vec![0.0; m];
                    for j in 0..n {
                        for i in 0..m {
                            col[i] = gout[i * n + j];
                        }
                        buf[j] += tree_sum(&col);
                    }
                });
            }
            Op::AddChan { a, bias, c, l } => {
                let (c, l) = (*c, *l);
                with_buf!(*a, |buf: &mut Vec<f64>| kernels::acc_unary(gout, buf, |g| g));
                with_buf!(*bias, |buf: &mut Vec<f64>| {
                    for ch in 0..c {
                        buf[ch] += tree_sum(&gout[ch * l..(ch + 1) * l]);
                    }
                });
            }
            Op::MulCol { a, col, m, n } => {
                let (m, n) = (*m, *n);
                with_buf!(*a, |buf: &mut Vec<f64>| {
                    let cv = val(*col);
                    for i in 0..m {
                        let s = cv[i];
                        for j in 0..n {
                            buf[i * n + j] += gout[i * n + j] * s;
                        }
                    }
                });
                with_buf!(*col, |buf: &mut Vec<f64>| {
                    let av = val(*a);
                    for i in 0..m {
                        buf[i] += tree_dot(&gout[i * n..(i + 1) * n], &av[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::RepeatRows { a, m, n, times } => {
                let (m, n, times) = (*m, *n, *times);
                with_buf!(*a, |buf: &mut Vec<f64>| {
                    for i in 0..m {
                        for j in 0..times {
                            let src = &gout[(i * times + j) * n..(i * times + j + 1) * n];
                            let dst = &mut buf[i * n..(i + 1) * n];
                            for (d, s) in dst.iter_mut().zip(src.iter()) {
                                *d += *s;
                            }
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let g = gout[0];
                with_buf!(*a, |buf: &mut Vec<f64>| {
                    for v in buf.iter_mut() {
                        *v += g;
                    }
                });
            }
            Op::MeanAll(a) => {
                let numel = nodes[a.0].value.numel().max(1);
                let g = gout[0] / numel as f64;
                with_buf!(*a, |buf: &mut Vec<f64>| {
                    for v in buf.iter_mut() {
                        *v += g;
                    }
                });
            }
            Op::SumRows { a, m, n } => {
                let (m, n) = (*m, *n);
                with_buf!(*a, |buf: &mut Vec<f64>| {
                    for i in 0..m {
                        let g = gout[i];
                        for j in 0..n {
                            buf[i * n + j] += g;
                        }
                    }
                });
            }
            Op::CumsumRowsExclusive { a, m, n } => {
                let (m, n) = (*m, *n);
                with_buf!(*a, |buf: &mut Vec<f64>| {
                    // out[i,j] saw a[i,k] for k < j, so grad a[i,k] = sum_{j>k} g[i,j].
                    for i in 0..m {
                        let mut suffix = 0.0;
                        for j in (0..n).rev() {
                            buf[i * n + j] += suffix;
                            suffix += gout[i * n + j];
                        }
                    }
                });
            }
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                with_buf!(*a, |buf: &mut Vec<f64>| kernels::matmul_a_bt(
                    gout,
                    val(*b),
                    buf,
                    m,
                    n,
                    k
                ));
                with_buf!(*b, |buf: &mut Vec<f64>| kernels::matmul_at_b(
                    val(*a),
                    gout,
                    buf,
                    m,
                    k,
                    n
                ));
            }
            Op::ConcatCols { parts, m, widths } => {
                let m = *m;
                let total: usize = widths.iter().sum();
                let mut off = 0usize;
                for (p, w) in parts.clone().iter().zip(widths.clone().iter()) {
                    let (w, off_c) = (*w, off);
                    with_buf!(*p, |buf: &mut Vec<f64>| {
                        for i in 0..m {
                            let src = &gout[i * total + off_c..i * total + off_c + w];
                            let dst = &mut buf[i * w..(i + 1) * w];
                            for (d, s) in dst.iter_mut().zip(src.iter()) {
                                *d += *s;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::FlatConcat { parts } => {
                let mut off = 0usize;
                for p in parts.clone() {
                    let len = nodes[p.0].value.numel();
                    let off_c = off;
                    with_buf!(p, |buf: &mut Vec<f64>| {
                        for (d, s) in buf.iter_mut().zip(gout[off_c..off_c + len].iter()) {
                            *d += *s;
                        }
                    });
                    off += len;
                }
            }
            Op::Slice { a, start, len } => {
                let (start, len) = (*start, *len);
                with_buf!(*a, |buf: &mut Vec<f64>| {
                    for (d, s) in buf[start..start + len].iter_mut().zip(gout.iter()) {
                        *d += *s;
                    }
                });
            }
            Op::Reshape(a) => {
                with_buf!(*a, |buf: &mut Vec<f64>| kernels::acc_unary(gout, buf, |g| g));
            }
            Op::Conv3x3 { input, weight, bias, cin, cout, h, w } => {
                let (cin, cout, h, w) = (*cin, *cout, *h, *w);
                with_buf!(*input, |buf: &mut Vec<f64>| kernels::conv3x3_grad_input(
                    gout,
                    val(*weight),
                    buf,
                    cin,
                    cout,
                    h,
                    w
                ));
                with_buf!(*weight, |buf: &mut Vec<f64>| kernels::conv3x3_grad_weight(
                    gout,
                    val(*input),
                    buf,
                    cin,
                    cout,
                    h,
                    w
                ));
                with_buf!(*bias, |buf: &mut Vec<f64>| {
                    for co in 0..cout {
                        buf[co] += tree_sum(&gout[co * h * w..(co + 1) * h * w]);
                    }
                });
            }
            Op::AvgPool2 { a, c, h, w } => {
                let (c, h, w) = (*c, *h, *w);
                let (oh, ow) = (h / 2, w / 2);
                with_buf!(*a, |buf: &mut Vec<f64>| {
                    for ch in 0..c {
                        for y in 0..oh {
                            for x in 0..ow {
                                let g = 0.25 * gout[ch * oh * ow + y * ow + x];
                                let base = ch * h * w + 2 * y * w + 2 * x;
                                buf[base] += g;
                                buf[base + 1] += g;
                                buf[base + w] += g;
                                buf[base + w + 1] += g;
                            }
                        }
                    }
                });
            }
            Op::Upsample2 { a, c, h, w } => {
                let (c, h, w) = (*c, *h, *w);
                let (oh, ow) = (h * 2, w * 2);
                with_buf!(*a, |buf: &mut Vec<f64>| {
                    for ch in 0..c {
                        for y in 0..oh {
                            for x in 0..ow {
                                buf[ch * h * w + (y / 2) * w + x / 2] +=
                                    gout[ch * oh * ow + y * ow + x];
                            }
                        }
                    }
                });
            }
            Op::Custom { inputs, vjp } => {
                let input_vals: Vec<&Tensor> =
                    inputs.iter().map(|v| &nodes[v.0].value).collect();
                let mut bufs: Vec<Option<Vec<f64>>> = inputs
                    .iter()
                    .map(|v| {
                        if nodes[v.0].requires {
                            Some(
                                grads[v.0]
                                    .take()
                                    .unwrap_or_else(|| vec![0.0; nodes[v.0].value.numel()]),
                            )
                        } else {
                            None
                        }
                    })
                    .collect();
                {
                    let mut gslots: Vec<Option<&mut Vec<f64>>> =
                        bufs.iter_mut().map(|b| b.as_mut()).collect();
                    vjp.backward(&input_vals, &nodes[idx].value, gout, &mut gslots);
                }
                for (v, buf) in inputs.iter().zip(bufs.into_iter()) {
                    if let Some(buf) = buf {
                        grads[v.0] = Some(buf);
                    }
                }
            }
        }
    }
}

/// Keep multi-megabyte tensor buffers on the heap instead of per-allocation
/// mmaps; the graphs here churn through them every step and the page-fault
/// cost otherwise dominates the numeric work.
fn tune_allocator() {
    #[cfg(target_os = "linux")]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        });
    }
}

fn as_matrix(shape: &[usize]) -> Result<(usize, usize), DiffError> {
    match shape.len() {
        1 => Ok((shape[0], 1)),
        2 => Ok((shape[0], shape[1])),
        _ => Err(DiffError::Invalid(format!(
            "expected rank 1 or 2 tensor, got shape {shape:?}"
        ))),
    }
}

/// Fixed-order pairwise dot product (deterministic, accurate).
pub(crate) fn tree_dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    match a.len() {
        0 => 0.0,
        1 => a[0] * b[0],
        2 => a[0] * b[0] + a[1] * b[1],
        n => {
            let mid = n / 2;
            tree_dot(&a[..mid], &b[..mid]) + tree_dot(&a[mid..], &b[mid..])
        }
    }
}
