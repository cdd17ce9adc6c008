//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! A [`Graph`] records every operation applied to its nodes. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and adds the
//! resulting gradients into the `grad` buffer of every leaf created with
//! `requires_grad`. Calling `backward` twice without [`Graph::zero_grad`]
//! accumulates, mirroring the usual autograd convention.
//!
//! Broadcasting is explicit: only [`Graph::add_row`] broadcasts (a bias row
//! over every row of a matrix).

use super::dense::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine { x: Var, scale: f64 },
    MulConst { x: Var, factor: Vec<f64> },
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    Pow { x: Var, exponent: f64 },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Sum(Var),
    Mean(Var),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    BceWithLogits { z: Var, targets: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation tape. Built fresh for every forward pass and dropped afterwards.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Stable `max(z,0) − z·t + ln(1 + e^{−|z|})`.
pub fn bce_with_logits_scalar(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

fn shape2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => dim_err(format!("{what}: expected a 2-d tensor, got shape {s:?}")),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. Its `requires_grad` flag decides whether gradients are
    /// collected for it.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    /// Adds a leaf that collects gradients.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(true), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg_any(&self, vs: &[Var]) -> bool {
        vs.iter().any(|&v| self.rg(v))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return dim_err(format!("{what}: shapes {sa:?} and {sb:?} differ"));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = &self.nodes[x.0].value;
        let out: Vec<f64> = src.values().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(src.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, s) = shape2(self.value(a), "matmul lhs")?;
        let (s2, t) = shape2(self.value(b), "matmul rhs")?;
        if s != s2 {
            return dim_err(format!(
                "matmul: shapes [{r}, {s}] and [{s2}, {t}] have mismatched inner dimensions"
            ));
        }
        let mut out = vec![0.0; r * t];
        gemm_acc(self.value(a).values(), self.value(b).values(), &mut out, r, s, t);
        let rg = self.rg_any(&[a, b]);
        Ok(self.push(Tensor::new(vec![r, t], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = shape2(self.value(x), "transpose")?;
        let src = self.value(x).values();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), rg))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let va = self.value(a);
        let vb = self.value(b);
        let out: Vec<f64> = va.values().iter().zip(vb.values()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.rg_any(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `x + row` for every row of `x`; `row` holds exactly `cols(x)` values.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(row).numel() != cols {
            return dim_err(format!(
                "add_row: bias shape {:?} does not match row width of {:?}",
                self.shape(row),
                self.shape(x)
            ));
        }
        let bias = self.value(row).values();
        let src = self.value(x);
        let mut out = src.values().to_vec();
        for chunk in out.chunks_mut(cols) {
            chunk.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
        }
        let t = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.rg_any(&[x, row]);
        Ok(self.push(t, Op::AddRow(x, row), rg))
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    /// Elementwise product with a constant array (dropout masks).
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Result<Var> {
        let src = self.value(x);
        if factor.len() != src.numel() {
            return dim_err(format!(
                "mul_const: {} factors for tensor of shape {:?}",
                factor.len(),
                src.shape()
            ));
        }
        let out = src.values().iter().zip(&factor).map(|(a, b)| a * b).collect();
        let t = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::MulConst { x, factor }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid_scalar, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu_scalar, Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn pow(&mut self, x: Var, exponent: f64) -> Var {
        self.unary(x, |v| v.powf(exponent), Op::Pow { x, exponent })
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.masked_softmax(x, axis, None)
    }

    /// Softmax along `axis` where positions with `keep[i] == false` get
    /// weight exactly zero (equivalent to a −∞ score).
    pub fn masked_softmax(&mut self, x: Var, axis: usize, keep: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return dim_err(format!("softmax: axis {axis} out of range for shape {shape:?}"));
        }
        let len = shape[axis];
        if len == 0 {
            return dim_err(format!("softmax: empty axis {axis} in shape {shape:?}"));
        }
        if let Some(k) = keep {
            if k.len() != len {
                return dim_err(format!("softmax: mask of length {} for axis of length {len}", k.len()));
            }
            if !k.iter().any(|&b| b) {
                return Err(Error::Contract("softmax: every position is masked".into()));
            }
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).values();
        let mut out = vec![0.0; src.len()];
        let live = |i: usize| keep.is_none_or(|k| k[i]);
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let mut max = f64::NEG_INFINITY;
                for i in (0..len).filter(|&i| live(i)) {
                    max = max.max(src[idx(i)]);
                }
                let mut total = 0.0;
                for i in (0..len).filter(|&i| live(i)) {
                    let e = (src[idx(i)] - max).exp();
                    out[idx(i)] = e;
                    total += e;
                }
                for i in (0..len).filter(|&i| live(i)) {
                    out[idx(i)] /= total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, outer, len, inner }, rg))
    }

    /// Row-wise layer normalization with learned `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if d == 0 || self.value(x).shape().is_empty() {
            return dim_err("layer_norm: feature dimension is zero");
        }
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return dim_err(format!(
                "layer_norm: gain {:?} / bias {:?} do not match width {d}",
                self.shape(gain),
                self.shape(bias)
            ));
        }
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm: eps must be positive".into()));
        }
        let src = self.value(x);
        let rows = src.rows();
        let g = self.value(gain).values();
        let b = self.value(bias).values();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = src.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.rg_any(&[x, gain, bias]);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).values().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return dim_err("mean of an empty tensor");
        }
        let s = self.value(x).values().iter().sum::<f64>() / n as f64;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// Columns `start..end` of a 2-d tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = shape2(self.value(x), "slice_cols")?;
        if start >= end || end > c {
            return dim_err(format!("slice_cols: range {start}..{end} invalid for [{r}, {c}]"));
        }
        let w = end - start;
        let src = self.value(x).values();
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![r, w], out)?, Op::SliceCols { x, start }, rg))
    }

    /// Rows `start..end` of a 2-d tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = shape2(self.value(x), "slice_rows")?;
        if start >= end || end > r {
            return dim_err(format!("slice_rows: range {start}..{end} invalid for [{r}, {c}]"));
        }
        let out = self.value(x).values()[start * c..end * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![end - start, c], out)?, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat_cols: nothing to concatenate");
        };
        let (rows, _) = shape2(self.value(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = shape2(self.value(p), "concat_cols")?;
            if r != rows {
                return dim_err(format!(
                    "concat_cols: row counts differ ({:?} vs {:?})",
                    self.shape(first),
                    self.shape(p)
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).values()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg_any(parts);
        Ok(self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat_rows: nothing to concatenate");
        };
        let (_, cols) = shape2(self.value(first), "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = shape2(self.value(p), "concat_rows")?;
            if c != cols {
                return dim_err(format!(
                    "concat_rows: column counts differ ({:?} vs {:?})",
                    self.shape(first),
                    self.shape(p)
                ));
            }
            rows += r;
            out.extend_from_slice(self.value(p).values());
        }
        let rg = self.rg_any(parts);
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Per-element binary cross-entropy on logits against constant targets.
    pub fn bce_with_logits(&mut self, z: Var, targets: &[f64]) -> Result<Var> {
        let src = self.value(z);
        if targets.len() != src.numel() {
            return dim_err(format!(
                "bce_with_logits: {} targets for logits of shape {:?}",
                targets.len(),
                src.shape()
            ));
        }
        let out = src
            .values()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| bce_with_logits_scalar(z, t))
            .collect();
        let t = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.rg(z);
        Ok(self.push(t, Op::BceWithLogits { z, targets: targets.to_vec() }, rg))
    }

    /// Reverse pass from the scalar `output`.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let numel = |v: Var| nodes[v.0].value.numel();
        // Hands back the gradient buffer for `v`, allocating zeros on first touch.
        fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; n])
        }

        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (r, s) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let t = nodes[b.0].value.shape()[1];
                if needs(a) {
                    let da = slot(grads, a, r * s);
                    gemm_nt_acc(g, nodes[b.0].value.values(), da, r, s, t);
                }
                if needs(b) {
                    let db = slot(grads, b, s * t);
                    gemm_tn_acc(nodes[a.0].value.values(), g, db, r, s, t);
                }
            }
            &Op::Transpose(x) => {
                if needs(x) {
                    let (r, c) = (out.shape()[0], out.shape()[1]);
                    let dx = slot(grads, x, r * c);
                    for p in 0..r {
                        for q in 0..c {
                            dx[q * r + p] += g[p * c + q];
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(v) {
                        slot(grads, v, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if needs(a) {
                    slot(grads, a, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if needs(b) {
                    slot(grads, b, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d -= x);
                }
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    let vb = nodes[b.0].value.values();
                    let da = slot(grads, a, g.len());
                    for k in 0..g.len() {
                        da[k] += g[k] * vb[k];
                    }
                }
                if needs(b) {
                    let va = nodes[a.0].value.values();
                    let db = slot(grads, b, g.len());
                    for k in 0..g.len() {
                        db[k] += g[k] * va[k];
                    }
                }
            }
            &Op::AddRow(x, row) => {
                if needs(x) {
                    slot(grads, x, g.len()).iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if needs(row) {
                    let cols = numel(row);
                    let db = slot(grads, row, cols);
                    for chunk in g.chunks(cols) {
                        db.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                    }
                }
            }
            &Op::Affine { x, scale } => {
                if needs(x) {
                    slot(grads, x, g.len()).iter_mut().zip(g).for_each(|(d, v)| *d += scale * v);
                }
            }
            Op::MulConst { x, factor } => {
                if needs(*x) {
                    let dx = slot(grads, *x, g.len());
                    for k in 0..g.len() {
                        dx[k] += g[k] * factor[k];
                    }
                }
            }
            &Op::Sigmoid(x) => self.pointwise_back(x, g, grads, |_, y| y * (1.0 - y), out),
            &Op::Tanh(x) => self.pointwise_back(x, g, grads, |_, y| 1.0 - y * y, out),
            &Op::Exp(x) => self.pointwise_back(x, g, grads, |_, y| y, out),
            &Op::Gelu(x) => self.pointwise_back(x, g, grads, |xv, _| gelu_grad(xv), out),
            &Op::Pow { x, exponent } => self.pointwise_back(
                x,
                g,
                grads,
                |xv, _| {
                    if exponent == 0.0 {
                        0.0
                    } else {
                        exponent * xv.powf(exponent - 1.0)
                    }
                },
                out,
            ),
            &Op::Softmax { x, outer, len, inner } => {
                if needs(x) {
                    let y = out.values();
                    let dx = slot(grads, x, y.len());
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * len + i) * inner + j;
                            let dot: f64 = (0..len).map(|i| g[idx(i)] * y[idx(i)]).sum();
                            for i in 0..len {
                                dx[idx(i)] += y[idx(i)] * (g[idx(i)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = numel(*gain);
                let rows = inv_std.len();
                if needs(*gain) {
                    let dg = slot(grads, *gain, d);
                    for r in 0..rows {
                        for c in 0..d {
                            dg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if needs(*bias) {
                    let db = slot(grads, *bias, d);
                    for r in 0..rows {
                        for c in 0..d {
                            db[c] += g[r * d + c];
                        }
                    }
                }
                if needs(*x) {
                    let gv = nodes[gain.0].value.values();
                    let dx = slot(grads, *x, rows * d);
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for c in 0..d {
                            dxhat[c] = gr[c] * gv[c];
                            mean_d += dxhat[c];
                            mean_dh += dxhat[c] * hr[c];
                        }
                        mean_d /= d as f64;
                        mean_dh /= d as f64;
                        for c in 0..d {
                            dx[r * d + c] += inv_std[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if needs(x) {
                    slot(grads, x, numel(x)).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean(x) => {
                if needs(x) {
                    let n = numel(x);
                    let share = g[0] / n as f64;
                    slot(grads, x, n).iter_mut().for_each(|d| *d += share);
                }
            }
            &Op::SliceCols { x, start } => {
                if needs(x) {
                    let (r, w) = (out.shape()[0], out.shape()[1]);
                    let c = nodes[x.0].value.cols();
                    let dx = slot(grads, x, r * c);
                    for p in 0..r {
                        for q in 0..w {
                            dx[p * c + start + q] += g[p * w + q];
                        }
                    }
                }
            }
            &Op::SliceRows { x, start } => {
                if needs(x) {
                    let c = out.cols();
                    let dx = slot(grads, x, numel(x));
                    dx[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, v)| *d += v);
                }
            }
            Op::ConcatCols(parts) => {
                let rows = out.shape()[0];
                let total = out.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.cols();
                    if needs(p) {
                        let dp = slot(grads, p, rows * w);
                        for r in 0..rows {
                            for q in 0..w {
                                dp[r * w + q] += g[r * total + offset + q];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = numel(p);
                    if needs(p) {
                        slot(grads, p, n)
                            .iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(d, v)| *d += v);
                    }
                    offset += n;
                }
            }
            Op::BceWithLogits { z, targets } => {
                if needs(*z) {
                    let zv = nodes[z.0].value.values();
                    let dz = slot(grads, *z, zv.len());
                    for k in 0..zv.len() {
                        dz[k] += g[k] * (sigmoid_scalar(zv[k]) - targets[k]);
                    }
                }
            }
        }
    }

    fn pointwise_back(
        &self,
        x: Var,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        deriv: impl Fn(f64, f64) -> f64,
        out: &Tensor,
    ) {
        if !self.nodes[x.0].requires_grad {
            return;
        }
        let xv = self.nodes[x.0].value.values();
        let y = out.values();
        let dx = grads[x.0].get_or_insert_with(|| vec![0.0; xv.len()]);
        for k in 0..xv.len() {
            dx[k] += g[k] * deriv(xv[k], y[k]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let mut g = Graph::new();
        let i = g.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let m = g.constant(mat(&[&[3.0, -1.0], &[2.5, 7.0]]));
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).values(), &[3.0, -1.0, 2.5, 7.0]);
    }

    #[test]
    fn small_matmul_forward() {
        let mut g = Graph::new();
        let a = g.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.constant(mat(&[&[0.0], &[1.0]]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(p), &[2, 1]);
        assert_eq!(g.value(p).values(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::row_vector(vec![0.0, 0.0]));
        let s = g.softmax(z, 1).unwrap();
        assert_eq!(g.value(s).values(), &[0.5, 0.5]);

        let v = g.constant(Tensor::row_vector(vec![1f64.ln(), 2f64.ln()]));
        let s = g.softmax(v, 1).unwrap();
        let out = g.value(s).values();
        assert!((out[0] - 1.0 / 3.0).abs() < 1e-15 && (out[1] - 2.0 / 3.0).abs() < 1e-15);

        let a = g.constant(Tensor::row_vector(vec![0.3, -1.2, 2.0]));
        let b = g.constant(Tensor::row_vector(vec![100.3, 98.8, 102.0]));
        let sa = g.softmax(a, 1).unwrap();
        let sb = g.softmax(b, 1).unwrap();
        for (x, y) in g.value(sa).values().iter().zip(g.value(sb).values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_empty_axis_and_full_mask() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::zeros(&[2, 0]));
        assert!(matches!(g.softmax(e, 1), Err(Error::Dimension(_))));
        let x = g.constant(Tensor::row_vector(vec![1.0, 2.0]));
        assert!(g.masked_softmax(x, 1, Some(&[false, false])).is_err());
    }

    #[test]
    fn softmax_along_first_axis() {
        let mut g = Graph::new();
        let x = g.constant(mat(&[&[0.0, 1.0], &[0.0, 1.0]]));
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).values(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn sigmoid_values() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::row_vector(vec![0.0, 3f64.ln(), -100.0, 800.0]));
        let s = g.sigmoid(z);
        let v = g.value(s).values();
        assert_eq!(v[0], 0.5);
        assert!((v[1] - 0.75).abs() < 1e-15);
        assert!(v[2] > 0.0 && v[2] <= 1e-30);
        assert_eq!(v[3], 1.0);
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::new();
        let one = g.constant(Tensor::full(&[3], 1.0));
        let zero = g.constant(Tensor::zeros(&[3]));
        let x = g.constant(Tensor::row_vector(vec![5.0, 5.0, 5.0]));
        let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
        assert_eq!(g.value(y).values(), &[0.0, 0.0, 0.0]);

        let one2 = g.constant(Tensor::full(&[2], 1.0));
        let zero2 = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::row_vector(vec![1.0, -1.0]));
        let y = g.layer_norm(x, one2, zero2, 1e-14).unwrap();
        let v = g.value(y).values();
        assert!((v[0] - 1.0).abs() < 1e-12 && (v[1] + 1.0).abs() < 1e-12);

        let empty = g.constant(Tensor::zeros(&[2, 0]));
        let e0 = g.constant(Tensor::zeros(&[0]));
        assert!(g.layer_norm(empty, e0, e0, 1e-5).is_err());
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row_vector(vec![1.0, 2.0, 3.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::row_vector(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);

        // documented accumulation on repeated backward
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row_vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::row_vector(vec![1.0, 2.0]));
        let x = g.param(Tensor::row_vector(vec![3.0, 4.0]));
        let p = g.mul(c, x).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn pow_zero_exponent_has_zero_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row_vector(vec![0.0, 0.5]));
        let p = g.pow(x, 0.0);
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
    }
}
