//! Reverse-mode differentiation by op recording.
//!
//! Every op appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse creation order, which is a valid reverse
//! topological order because a node can only reference earlier nodes.

use super::gemm::{count_macs, gemm};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Powf(Var, f64),
    Abs(Var),
    Sigmoid(Var),
    Gelu(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        input: Var,
        indices: Vec<usize>,
    },
    ScatterRows {
        input: Var,
        indices: Vec<usize>,
    },
    SoftmaxRows(Var),
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Im2Col {
        input: Var,
        channels: usize,
        height: usize,
        width: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward loss with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Maximum(a, b)
            | Op::Minimum(a, b)
            | Op::AddRow(a, b)
            | Op::AddCol(a, b)
            | Op::MatMul(a, b) => self.needs(*a) || self.needs(*b),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Powf(a, _)
            | Op::Abs(a)
            | Op::Sigmoid(a)
            | Op::Gelu(a)
            | Op::Relu(a)
            | Op::Clamp(a, _, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SoftmaxRows(a)
            | Op::Sum(a)
            | Op::Mean(a) => self.needs(*a),
            Op::Concat { inputs, .. } => inputs.iter().any(|v| self.needs(*v)),
            Op::Narrow { input, .. }
            | Op::GatherRows { input, .. }
            | Op::ScatterRows { input, .. }
            | Op::Im2Col { input, .. } => self.needs(*input),
            Op::LayerNorm {
                input, gamma, beta, ..
            } => self.needs(*input) || self.needs(*gamma) || self.needs(*beta),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, op, name)
    }

    fn map(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|x| f(*x)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Div(a, b), "div", |x, y| x / y)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Maximum(a, b), "maximum", f64::max)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Minimum(a, b), "minimum", f64::min)
    }

    /// `x[m,n] + b[n]`, with `b` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(b).numel() != n {
            return Err(Error::dim(
                "add_row",
                format!("bias {:?} for [{m},{n}]", self.shape(b)),
            ));
        }
        let vb = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(vb) {
                *o += bv;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(value, Op::AddRow(x, b), "add_row")
    }

    /// `x[m,n] + b[m]`, with `b` broadcast over columns.
    pub fn add_col(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(b).numel() != m {
            return Err(Error::dim(
                "add_col",
                format!("bias {:?} for [{m},{n}]", self.shape(b)),
            ));
        }
        let vb = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for (row, bv) in data.chunks_mut(n).zip(vb) {
            for o in row.iter_mut() {
                *o += bv;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(value, Op::AddCol(x, b), "add_col")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, s), "scale", |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map(a, Op::AddScalar(a), "add_scalar", |x| x + s)
    }

    /// `s - a`.
    pub fn rsub_scalar(&mut self, s: f64, a: Var) -> Result<Var> {
        let neg = self.scale(a, -1.0)?;
        self.add_scalar(neg, s)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), "exp", f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Log(a), "log", f64::ln)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        self.map(a, Op::Powf(a, p), "powf", |x| x.powf(p))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Abs(a), "abs", f64::abs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), "sigmoid", sigmoid)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Gelu(a), "gelu", |x| {
            0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
        })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), "relu", |x| x.max(0.0))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.map(a, Op::Clamp(a, lo, hi), "clamp", |x| x.clamp(lo, hi))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        count_macs((m * k * n) as u64);
        let value = Tensor::new([m, n], out)?;
        self.push(value, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        self.push(value, Op::Transpose(a), "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push(value, Op::Reshape(a), "reshape")
    }

    /// Concatenate matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() || axis > 1 {
            return Err(Error::dim("concat", "need at least one input and axis 0 or 1"));
        }
        let dims: Vec<(usize, usize)> = inputs
            .iter()
            .map(|v| self.value(*v).dims2())
            .collect::<Result<_>>()?;
        let value = if axis == 0 {
            let cols = dims[0].1;
            if dims.iter().any(|d| d.1 != cols) {
                return Err(Error::dim("concat", format!("column mismatch {:?}", dims)));
            }
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for v in inputs {
                data.extend_from_slice(self.value(*v).data());
            }
            Tensor::new([rows, cols], data)?
        } else {
            let rows = dims[0].0;
            if dims.iter().any(|d| d.0 != rows) {
                return Err(Error::dim("concat", format!("row mismatch {:?}", dims)));
            }
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for (v, d) in inputs.iter().zip(&dims) {
                    let src = self.value(*v).data();
                    data.extend_from_slice(&src[r * d.1..(r + 1) * d.1]);
                }
            }
            Tensor::new([rows, cols], data)?
        };
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            "concat",
        )
    }

    /// Contiguous slice `[start, start+len)` along `axis` of a matrix.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2()?;
        let extent = if axis == 0 { rows } else { cols };
        if axis > 1 || start + len > extent || len == 0 {
            return Err(Error::dim(
                "narrow",
                format!("axis {axis} [{start}, {}) of [{rows},{cols}]", start + len),
            ));
        }
        let src = self.value(a).data();
        let value = if axis == 0 {
            Tensor::new([len, cols], src[start * cols..(start + len) * cols].to_vec())?
        } else {
            let mut data = Vec::with_capacity(rows * len);
            for r in 0..rows {
                data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
            }
            Tensor::new([rows, len], data)?
        };
        self.push(value, Op::Narrow { input: a, axis, start }, "narrow")
    }

    /// Rows `indices` of a matrix, in the given order. Duplicates are allowed.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2()?;
        if let Some(bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::dim("gather_rows", format!("row {bad} of {rows}")));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new([indices.len(), cols], data)?;
        self.push(
            value,
            Op::GatherRows {
                input: a,
                indices: indices.to_vec(),
            },
            "gather_rows",
        )
    }

    /// Places row `i` of `a` at row `indices[i]` of a zero matrix with
    /// `rows` rows. Target rows must be distinct.
    pub fn scatter_rows(&mut self, a: Var, indices: &[usize], rows: usize) -> Result<Var> {
        let (n, cols) = self.value(a).dims2()?;
        if indices.len() != n {
            return Err(Error::dim("scatter_rows", format!("{} indices for {n} rows", indices.len())));
        }
        let mut seen = vec![false; rows];
        for &i in indices {
            if i >= rows {
                return Err(Error::dim("scatter_rows", format!("row {i} of {rows}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Contract(format!("scatter_rows: duplicate target row {i}")));
            }
        }
        let src = self.value(a).data();
        let mut data = vec![0.0; rows * cols];
        for (k, &i) in indices.iter().enumerate() {
            data[i * cols..(i + 1) * cols].copy_from_slice(&src[k * cols..(k + 1) * cols]);
        }
        let value = Tensor::new([rows, cols], data)?;
        self.push(
            value,
            Op::ScatterRows {
                input: a,
                indices: indices.to_vec(),
            },
            "scatter_rows",
        )
    }

    /// Row-wise softmax, stabilized by subtracting the row maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, cols) = self.value(a).dims2()?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::SoftmaxRows(a), "softmax_rows")
    }

    /// Normalizes each row to zero mean / unit variance, then applies the
    /// per-column affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(Error::dim("layer_norm", format!("affine params for width {cols}")));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let xh = (row[c] - mean) * rs;
                xhat[r * cols + c] = xh;
                out[r * cols + c] = xh * g[c] + b[c];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(
            value,
            Op::LayerNorm {
                input: x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.sum() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), "mean")
    }

    /// 3×3, stride-1, zero-padded patch extraction for a `[C, H·W]` feature
    /// map. Output is `[C·9, H·W]`; row `c·9 + ky·3 + kx` holds the input
    /// shifted by `(ky-1, kx-1)`.
    pub fn im2col3x3(&mut self, a: Var, channels: usize, height: usize, width: usize) -> Result<Var> {
        if self.value(a).numel() != channels * height * width {
            return Err(Error::dim(
                "im2col3x3",
                format!("{:?} is not [{channels}, {height}x{width}]", self.shape(a)),
            ));
        }
        let src = self.value(a).data();
        let hw = height * width;
        let mut out = vec![0.0; channels * 9 * hw];
        for c in 0..channels {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = (c * 9 + ky * 3 + kx) * hw;
                    for y in 0..height {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= height as isize {
                            continue;
                        }
                        for x in 0..width {
                            let sx = x as isize + kx as isize - 1;
                            if sx < 0 || sx >= width as isize {
                                continue;
                            }
                            out[row + y * width + x] =
                                src[c * hw + sy as usize * width + sx as usize];
                        }
                    }
                }
            }
        }
        let value = Tensor::new([channels * 9, hw], out)?;
        self.push(
            value,
            Op::Im2Col {
                input: a,
                channels,
                height,
                width,
            },
            "im2col3x3",
        )
    }

    /// Populates gradients of the scalar `loss` with respect to every node
    /// that depends on a trainable leaf. Allowed once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let nodes = &self.nodes;
        // Accumulates into the gradient buffer of `v`, allocating on first use.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * vb[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * va[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / vb[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] -= g[k] * va[k] / (vb[k] * vb[k]);
                    }
                });
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let is_max = matches!(node.op, Op::Maximum(..));
                let (va, vb) = (val(*a), val(*b));
                let pick_a = |k: usize| if is_max { va[k] >= vb[k] } else { va[k] <= vb[k] };
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        if pick_a(k) {
                            d[k] += g[k];
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        if !pick_a(k) {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::AddRow(x, b) => {
                acc(*x, &mut |d| add_into(d, g));
                let n = nodes[b.0].value.numel();
                acc(*b, &mut |d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::AddCol(x, b) => {
                acc(*x, &mut |d| add_into(d, g));
                let m = nodes[b.0].value.numel();
                let n = g.len() / m;
                acc(*b, &mut |d| {
                    for (dv, row) in d.iter_mut().zip(g.chunks(n)) {
                        *dv += row.iter().sum::<f64>();
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |d| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g * s)
            }),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Exp(a) => acc(*a, &mut |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * out[k];
                }
            }),
            Op::Log(a) => {
                let va = val(*a);
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / va[k];
                    }
                })
            }
            Op::Powf(a, p) => {
                let va = val(*a);
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * p * va[k].powf(p - 1.0);
                    }
                })
            }
            Op::Abs(a) => {
                let va = val(*a);
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * va[k].signum() * (va[k] != 0.0) as u8 as f64;
                    }
                })
            }
            Op::Sigmoid(a) => acc(*a, &mut |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * out[k] * (1.0 - out[k]);
                }
            }),
            Op::Gelu(a) => {
                let va = val(*a);
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        let x = va[k];
                        let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        d[k] += g[k] * (0.5 * (1.0 + t) + 0.5 * x * dt);
                    }
                })
            }
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        if va[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                })
            }
            Op::Clamp(a, lo, hi) => {
                let va = val(*a);
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        if va[k] >= *lo && va[k] <= *hi {
                            d[k] += g[k];
                        }
                    }
                })
            }
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().expect("matmul lhs");
                let n = nodes[b.0].value.dims2().expect("matmul rhs").1;
                let (va, vb) = (val(*a), val(*b));
                // dA = dC · Bᵀ, dB = Aᵀ · dC
                acc(*a, &mut |d| gemm(m, n, k, g, false, vb, true, d, true));
                acc(*b, &mut |d| gemm(k, m, n, va, true, g, false, d, true));
            }
            Op::Transpose(a) => {
                let (r, c) = nodes[a.0].value.dims2().expect("transpose input");
                acc(*a, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                })
            }
            Op::Concat { inputs, axis } => {
                let (rows, cols) = node.value.dims2().expect("concat output");
                let mut offset = 0;
                for v in inputs {
                    let (r, c) = nodes[v.0].value.dims2().expect("concat input");
                    if *axis == 0 {
                        let start = offset * cols;
                        acc(*v, &mut |d| add_into(d, &g[start..start + r * c]));
                        offset += r;
                    } else {
                        let start = offset;
                        acc(*v, &mut |d| {
                            for row in 0..rows {
                                add_into(
                                    &mut d[row * c..(row + 1) * c],
                                    &g[row * cols + start..row * cols + start + c],
                                );
                            }
                        });
                        offset += c;
                    }
                }
            }
            Op::Narrow { input, axis, start } => {
                let (_, cols) = nodes[input.0].value.dims2().expect("narrow input");
                let (r, c) = node.value.dims2().expect("narrow output");
                acc(*input, &mut |d| {
                    if *axis == 0 {
                        add_into(&mut d[start * cols..(start + r) * cols], g);
                    } else {
                        for row in 0..r {
                            add_into(
                                &mut d[row * cols + start..row * cols + start + c],
                                &g[row * c..(row + 1) * c],
                            );
                        }
                    }
                })
            }
            Op::GatherRows { input, indices } => {
                let cols = node.value.dims2().expect("gather output").1;
                acc(*input, &mut |d| {
                    for (k, &i) in indices.iter().enumerate() {
                        add_into(&mut d[i * cols..(i + 1) * cols], &g[k * cols..(k + 1) * cols]);
                    }
                })
            }
            Op::ScatterRows { input, indices } => {
                let cols = node.value.dims2().expect("scatter output").1;
                acc(*input, &mut |d| {
                    for (k, &i) in indices.iter().enumerate() {
                        add_into(&mut d[k * cols..(k + 1) * cols], &g[i * cols..(i + 1) * cols]);
                    }
                })
            }
            Op::SoftmaxRows(a) => {
                let cols = node.value.dims2().expect("softmax output").1;
                acc(*a, &mut |d| {
                    for ((drow, grow), yrow) in
                        d.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for c in 0..cols {
                            drow[c] += yrow[c] * (grow[c] - dot);
                        }
                    }
                })
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = nodes[gamma.0].value.numel();
                let gv = val(*gamma);
                acc(*gamma, &mut |d| {
                    for (grow, xrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            d[c] += grow[c] * xrow[c];
                        }
                    }
                });
                acc(*beta, &mut |d| {
                    for grow in g.chunks(cols) {
                        add_into(d, grow);
                    }
                });
                acc(*input, &mut |d| {
                    let n = cols as f64;
                    for (r, ((drow, grow), xrow)) in d
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(xhat.chunks(cols))
                        .enumerate()
                    {
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for c in 0..cols {
                            let dxh = grow[c] * gv[c];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xrow[c];
                        }
                        for c in 0..cols {
                            let dxh = grow[c] * gv[c];
                            drow[c] += rstd[r] / n * (n * dxh - sum_dxh - xrow[c] * sum_dxh_xh);
                        }
                    }
                })
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.numel() as f64;
                acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n))
            }
            Op::Im2Col {
                input,
                channels,
                height,
                width,
            } => {
                let (h, w) = (*height, *width);
                let hw = h * w;
                acc(*input, &mut |d| {
                    for c in 0..*channels {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let row = (c * 9 + ky * 3 + kx) * hw;
                                for y in 0..h {
                                    let sy = y as isize + ky as isize - 1;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    for x in 0..w {
                                        let sx = x as isize + kx as isize - 1;
                                        if sx < 0 || sx >= w as isize {
                                            continue;
                                        }
                                        d[c * hw + sy as usize * w + sx as usize] +=
                                            g[row + y * w + x];
                                    }
                                }
                            }
                        }
                    }
                })
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
