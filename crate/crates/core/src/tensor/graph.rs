use super::kernels::{self, MatRef};
use super::{broadcast_shape, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Storage precision of forward values. `F32` rounds every op output to
/// single precision; gradients are always accumulated in `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Softplus(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Matmul(Var, Var),
    Bmm(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        stride: usize,
        cols: Vec<f64>,
    },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    IndexSelect { x: Var, indices: Vec<usize> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Matmul(a, b) | Bmm(a, b) => {
                vec![*a, *b]
            }
            AddScalar(x) | MulScalar(x, _) | Sigmoid(x) | Tanh(x) | Gelu(x) | Relu(x)
            | Exp(x) | Log(x) | Sqrt(x) | Softplus(x) | Softmax(x) | LogSoftmax(x) | Sum(x)
            | Mean(x) | Reshape(x) => vec![*x],
            Clamp { x, .. }
            | SumAxis { x, .. }
            | Slice { x, .. }
            | Permute { x, .. }
            | IndexSelect { x, .. } => vec![*x],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Conv1d { x, w, .. } => vec![*x, *w],
            Concat { inputs, .. } => inputs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape.
///
/// Values are immutable once recorded. Nodes whose inputs carry no gradient
/// are stored as constants and skipped by [`Graph::backward`].
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when the root does not depend on `v`.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

enum Bcast {
    Same,
    /// rhs repeats over the leading axes of lhs
    Suffix,
    General(Vec<usize>, Vec<usize>),
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            precision: Precision::F64,
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_precision(precision: Precision) -> Self {
        Graph {
            precision,
            ..Self::new()
        }
    }

    /// Reject non-finite values as soon as an op produces them.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, name: &'static str, mut value: Tensor, op: Op) -> Result<Var> {
        if self.precision == Precision::F32 {
            for x in value.data_mut() {
                *x = *x as f32 as f64;
            }
        }
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf_node(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        let v = self.push("leaf", value, Op::Leaf)?;
        self.nodes[v.0].requires_grad = requires_grad;
        Ok(v)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf_node(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf_node(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.leaf_node(value, requires_grad)
    }

    // ---------------------------------------------------------------------
    // Elementwise binary ops (trailing-axis broadcasting)
    // ---------------------------------------------------------------------

    fn bcast_plan(&self, op: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, Bcast)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok((sa.to_vec(), Bcast::Same));
        }
        let out = broadcast_shape(sa, sb).ok_or_else(|| TensorError::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        if out == sa && sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb {
            return Ok((out, Bcast::Suffix));
        }
        let stra = kernels::broadcast_strides(sa, &out);
        let strb = kernels::broadcast_strides(sb, &out);
        Ok((out, Bcast::General(stra, strb)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (shape, plan) = self.bcast_plan(name, a, b)?;
        let (da, db) = (self.data(a), self.data(b));
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match &plan {
            Bcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Suffix => {
                let nb = db.len();
                da.iter().enumerate().map(|(i, &x)| f(x, db[i % nb])).collect()
            }
            Bcast::General(stra, strb) => {
                let mut out = vec![0.0; n];
                kernels::for_each_broadcast(&shape, stra, strb, |i, ia, ib| {
                    out[i] = f(da[ia], db[ib]);
                });
                out
            }
        };
        self.push(name, Tensor::new(shape, data)?, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    // ---------------------------------------------------------------------
    // Unary ops
    // ---------------------------------------------------------------------

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&t| f(t)).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push(name, t, op)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", x, |t| t + c, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("mul_scalar", x, |t| t * c, Op::MulScalar(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.mul_scalar(x, -1.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, kernels::gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |t| if t > 0.0 { t } else { 0.0 }, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary("sqrt", x, f64::sqrt, Op::Sqrt(x))
    }

    /// `ln(1 + e^x)`, overflow-safe.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, kernels::softplus, Op::Softplus(x))
    }

    /// Clamp into `[lo, hi]`. Gradient is 1 strictly inside, 0 elsewhere.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(TensorError::invalid("clamp", format!("lo {lo} > hi {hi}")));
        }
        self.unary("clamp", x, |t| t.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    // ---------------------------------------------------------------------
    // Last-axis normalizations
    // ---------------------------------------------------------------------

    fn rows(&self, op: &'static str, x: Var) -> Result<usize> {
        match self.shape(x).last() {
            Some(&d) => Ok(d),
            None => Err(TensorError::invalid(op, "needs at least one axis")),
        }
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = self.rows("softmax", x)?;
        let v = self.value(x);
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for r in row.iter_mut() {
                *r = (*r - m).exp();
                s += *r;
            }
            row.iter_mut().for_each(|r| *r /= s);
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push("softmax", t, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let d = self.rows("log_softmax", x)?;
        let v = self.value(x);
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|r| (r - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|r| *r -= lse);
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push("log_softmax", t, Op::LogSoftmax(x))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.rows("layer_norm", x)?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xs = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let nrows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; nrows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..nrows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    // ---------------------------------------------------------------------
    // Reductions
    // ---------------------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::invalid("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xs = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &xs[(o * n + k) * inner..][..inner];
                let dst = &mut out[o * inner..][..inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        self.push("sum_axis", Tensor::new(oshape, out)?, Op::SumAxis { x, axis })
    }

    // ---------------------------------------------------------------------
    // Products
    // ---------------------------------------------------------------------

    /// `[m, k] @ [k, n]`. No broadcasting.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            MatRef::new(self.data(a), m, k),
            MatRef::new(self.data(b), k, n),
            &mut out,
            0.0,
        );
        self.push("matmul", Tensor::new([m, n], out)?, Op::Matmul(a, b))
    }

    /// `[bt, m, k] @ [bt, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bt * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..bt {
            kernels::gemm(
                MatRef::new(&da[i * m * k..][..m * k], m, k),
                MatRef::new(&db[i * k * n..][..k * n], k, n),
                &mut out[i * m * n..][..m * n],
                0.0,
            );
        }
        self.push("bmm", Tensor::new([bt, m, n], out)?, Op::Bmm(a, b))
    }

    /// 1-D convolution over `x [B, T, C_in]` with `w [C_out, C_in, K]`,
    /// no padding. Output `[B, (T - K) / stride + 1, C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv1d",
            lhs: sx.clone(),
            rhs: sw.clone(),
        };
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] {
            return Err(mismatch());
        }
        if stride == 0 {
            return Err(TensorError::invalid("conv1d", "stride must be positive"));
        }
        let (bsz, len, cin) = (sx[0], sx[1], sx[2]);
        let (cout, kernel) = (sw[0], sw[2]);
        if len < kernel {
            return Err(TensorError::invalid(
                "conv1d",
                format!("input length {len} shorter than kernel {kernel}"),
            ));
        }
        let out_len = (len - kernel) / stride + 1;
        let cols = kernels::im2col(self.data(x), bsz, len, cin, kernel, stride, out_len);
        let mut out = vec![0.0; bsz * out_len * cout];
        kernels::gemm(
            MatRef::new(&cols, bsz * out_len, cin * kernel),
            MatRef::new(self.data(w), cout, cin * kernel).t(),
            &mut out,
            0.0,
        );
        let t = Tensor::new([bsz, out_len, cout], out)?;
        self.push("conv1d", t, Op::Conv1d { x, w, stride, cols })
    }

    // ---------------------------------------------------------------------
    // Shape manipulation
    // ---------------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", t, Op::Reshape(x))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::invalid("permute", format!("bad permutation {perm:?} for shape {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = contiguous_strides(&shape);
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let xs = self.data(x);
        let mut out = vec![0.0; xs.len()];
        let zero = vec![0; out_shape.len()];
        kernels::for_each_broadcast(&out_shape, &src_strides, &zero, |i, src, _| {
            out[i] = xs[src];
        });
        self.push(
            "permute",
            Tensor::new(out_shape, out)?,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        )
    }

    /// Swap two axes.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let mut perm: Vec<usize> = (0..self.shape(x).len()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(TensorError::invalid("transpose", format!("axes ({a}, {b}) out of range")));
        }
        perm.swap(a, b);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => return Err(TensorError::invalid("concat", "no inputs")),
        };
        if axis >= first.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * n..][..n]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(
            "concat",
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let xs = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xs[(o * shape[axis] + start) * inner..][..len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        self.push("slice", Tensor::new(oshape, out)?, Op::Slice { x, axis, start })
    }

    /// Rows of `x` (first axis) at `indices`, in order; repeats allowed.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || indices.is_empty() || indices.iter().any(|&i| i >= shape[0]) {
            return Err(TensorError::invalid("index_select", format!("indices out of range for {shape:?}")));
        }
        let inner: usize = shape[1..].iter().product();
        let xs = self.data(x);
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            out.extend_from_slice(&xs[i * inner..][..inner]);
        }
        let mut oshape = shape;
        oshape[0] = indices.len();
        self.push(
            "index_select",
            Tensor::new(oshape, out)?,
            Op::IndexSelect {
                x,
                indices: indices.to_vec(),
            },
        )
    }

    // ---------------------------------------------------------------------
    // Reverse pass
    // ---------------------------------------------------------------------

    /// Accumulates d(root)/d(leaf) for every leaf that requires grad.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(TensorError::NonScalarRoot(rv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop(node, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        use Op::*;
        let y = node.value.data();
        match &node.op {
            Leaf => {}
            Add(a, b) => self.bcast_back(*a, *b, &node.value, g, grads, |g, _, _| (g, g)),
            Sub(a, b) => self.bcast_back(*a, *b, &node.value, g, grads, |g, _, _| (g, -g)),
            Mul(a, b) => self.bcast_back(*a, *b, &node.value, g, grads, |g, x, y| (g * y, g * x)),
            Div(a, b) => {
                self.bcast_back(*a, *b, &node.value, g, grads, |g, x, y| (g / y, -g * x / (y * y)))
            }
            AddScalar(x) => self.accum(*x, grads, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g)),
            MulScalar(x, c) => self.accum(*x, grads, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g)),
            Sigmoid(x) => self.accum(*x, grads, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Tanh(x) => self.accum(*x, grads, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }),
            Gelu(x) => {
                let xs = self.data(*x);
                self.accum(*x, grads, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * kernels::gelu_grad(xs[i]);
                    }
                })
            }
            Relu(x) => {
                let xs = self.data(*x);
                self.accum(*x, grads, |d| {
                    for i in 0..d.len() {
                        if xs[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                })
            }
            Exp(x) => self.accum(*x, grads, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * y[i];
                }
            }),
            Log(x) => {
                let xs = self.data(*x);
                self.accum(*x, grads, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / xs[i];
                    }
                })
            }
            Sqrt(x) => self.accum(*x, grads, |d| {
                for i in 0..d.len() {
                    if y[i] > 0.0 {
                        d[i] += g[i] * 0.5 / y[i];
                    }
                }
            }),
            Softplus(x) => {
                let xs = self.data(*x);
                self.accum(*x, grads, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * kernels::sigmoid(xs[i]);
                    }
                })
            }
            Clamp { x, lo, hi } => {
                let xs = self.data(*x);
                self.accum(*x, grads, |d| {
                    for i in 0..d.len() {
                        if xs[i] > *lo && xs[i] < *hi {
                            d[i] += g[i];
                        }
                    }
                })
            }
            Softmax(x) => {
                let dim = *node.value.shape().last().unwrap();
                self.accum(*x, grads, |d| {
                    for ((dr, gr), yr) in d.chunks_mut(dim).zip(g.chunks(dim)).zip(y.chunks(dim)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..dim {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                })
            }
            LogSoftmax(x) => {
                let dim = *node.value.shape().last().unwrap();
                self.accum(*x, grads, |d| {
                    for ((dr, gr), yr) in d.chunks_mut(dim).zip(g.chunks(dim)).zip(y.chunks(dim)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..dim {
                            dr[j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                })
            }
            LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let dim = self.shape(*gamma)[0];
                let gam = self.data(*gamma);
                self.accum(*gamma, grads, |d| {
                    for (gr, hr) in g.chunks(dim).zip(xhat.chunks(dim)) {
                        for j in 0..dim {
                            d[j] += gr[j] * hr[j];
                        }
                    }
                });
                self.accum(*beta, grads, |d| {
                    for gr in g.chunks(dim) {
                        d.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                });
                self.accum(*x, grads, |d| {
                    let mut dh = vec![0.0; dim];
                    for (r, ((dr, gr), hr)) in d
                        .chunks_mut(dim)
                        .zip(g.chunks(dim))
                        .zip(xhat.chunks(dim))
                        .enumerate()
                    {
                        for j in 0..dim {
                            dh[j] = gr[j] * gam[j];
                        }
                        let m1 = dh.iter().sum::<f64>() / dim as f64;
                        let m2 = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / dim as f64;
                        for j in 0..dim {
                            dr[j] += rstd[r] * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                });
            }
            Sum(x) => self.accum(*x, grads, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Mean(x) => self.accum(*x, grads, |d| {
                let s = g[0] / d.len() as f64;
                d.iter_mut().for_each(|d| *d += s)
            }),
            SumAxis { x, axis } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let n = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                self.accum(*x, grads, |d| {
                    for o in 0..outer {
                        for k in 0..n {
                            let dst = &mut d[(o * n + k) * inner..][..inner];
                            dst.iter_mut()
                                .zip(&g[o * inner..][..inner])
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                })
            }
            Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let gm = MatRef::new(g, m, n);
                let (da, db) = (self.data(*a), self.data(*b));
                self.accum(*a, grads, |d| kernels::gemm(gm, MatRef::new(db, k, n).t(), d, 1.0));
                self.accum(*b, grads, |d| kernels::gemm(MatRef::new(da, m, k).t(), gm, d, 1.0));
            }
            Bmm(a, b) => {
                let sa = self.shape(*a);
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.shape(*b)[2];
                let (da, db) = (self.data(*a), self.data(*b));
                self.accum(*a, grads, |d| {
                    for i in 0..bt {
                        kernels::gemm(
                            MatRef::new(&g[i * m * n..][..m * n], m, n),
                            MatRef::new(&db[i * k * n..][..k * n], k, n).t(),
                            &mut d[i * m * k..][..m * k],
                            1.0,
                        );
                    }
                });
                self.accum(*b, grads, |d| {
                    for i in 0..bt {
                        kernels::gemm(
                            MatRef::new(&da[i * m * k..][..m * k], m, k).t(),
                            MatRef::new(&g[i * m * n..][..m * n], m, n),
                            &mut d[i * k * n..][..k * n],
                            1.0,
                        );
                    }
                });
            }
            Conv1d { x, w, stride, cols } => {
                let sx = self.shape(*x);
                let (bsz, len, cin) = (sx[0], sx[1], sx[2]);
                let sw = self.shape(*w);
                let (cout, kernel) = (sw[0], sw[2]);
                let out_len = node.value.shape()[1];
                let rows = bsz * out_len;
                let width = cin * kernel;
                let gm = MatRef::new(g, rows, cout);
                self.accum(*w, grads, |d| {
                    kernels::gemm(gm.t(), MatRef::new(cols, rows, width), d, 1.0)
                });
                if self.nodes[x.0].requires_grad {
                    let mut dcols = vec![0.0; rows * width];
                    kernels::gemm(gm, MatRef::new(self.data(*w), cout, width), &mut dcols, 0.0);
                    self.accum(*x, grads, |d| {
                        kernels::col2im(&dcols, d, bsz, len, cin, kernel, *stride, out_len)
                    });
                }
            }
            Concat { inputs, axis } => {
                let oshape = node.value.shape();
                let outer: usize = oshape[..*axis].iter().product();
                let inner: usize = oshape[axis + 1..].iter().product();
                let total = oshape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let n = self.shape(v)[*axis] * inner;
                    self.accum(v, grads, |d| {
                        for o in 0..outer {
                            d[o * n..][..n]
                                .iter_mut()
                                .zip(&g[o * total + offset..][..n])
                                .for_each(|(d, g)| *d += g);
                        }
                    });
                    offset += n;
                }
            }
            Slice { x, axis, start } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let full = shape[*axis];
                let len = node.value.shape()[*axis];
                self.accum(*x, grads, |d| {
                    for o in 0..outer {
                        d[(o * full + start) * inner..][..len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..][..len * inner])
                            .for_each(|(d, g)| *d += g);
                    }
                })
            }
            Permute { x, perm } => {
                let in_strides = contiguous_strides(self.shape(*x));
                let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                let zero = vec![0; src.len()];
                let oshape = node.value.shape().to_vec();
                self.accum(*x, grads, |d| {
                    kernels::for_each_broadcast(&oshape, &src, &zero, |i, s, _| d[s] += g[i]);
                })
            }
            Reshape(x) => self.accum(*x, grads, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g)),
            IndexSelect { x, indices } => {
                let inner: usize = self.shape(*x)[1..].iter().product();
                self.accum(*x, grads, |d| {
                    for (row, &i) in indices.iter().enumerate() {
                        d[i * inner..][..inner]
                            .iter_mut()
                            .zip(&g[row * inner..][..inner])
                            .for_each(|(d, g)| *d += g);
                    }
                })
            }
        }
    }

    fn accum(&self, v: Var, grads: &mut [Option<Vec<f64>>], f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(buf);
    }

    fn bcast_back(
        &self,
        a: Var,
        b: Var,
        out: &Tensor,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        f: impl Fn(f64, f64, f64) -> (f64, f64),
    ) {
        let (xa, xb) = (self.data(a), self.data(b));
        let shape = out.shape();
        let (sa, sb) = (self.shape(a), self.shape(b));
        let mut ga = vec![0.0; xa.len()];
        let mut gb = vec![0.0; xb.len()];
        if sa == sb {
            for i in 0..g.len() {
                let (da, db) = f(g[i], xa[i], xb[i]);
                ga[i] += da;
                gb[i] += db;
            }
        } else {
            let stra = kernels::broadcast_strides(sa, shape);
            let strb = kernels::broadcast_strides(sb, shape);
            kernels::for_each_broadcast(shape, &stra, &strb, |i, ia, ib| {
                let (da, db) = f(g[i], xa[ia], xb[ib]);
                ga[ia] += da;
                gb[ib] += db;
            });
        }
        self.accum(a, grads, |d| d.iter_mut().zip(&ga).for_each(|(d, g)| *d += g));
        self.accum(b, grads, |d| d.iter_mut().zip(&gb).for_each(|(d, g)| *d += g));
    }
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}
