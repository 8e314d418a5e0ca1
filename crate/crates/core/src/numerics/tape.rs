use std::sync::Arc;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Abs(Var),
    Softmax(Var),
    Conv1d { x: Var, kernel: Var, k: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, indices: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode computation record.
///
/// Every primitive appends one node; [`Tape::backward`] replays them in exact
/// reverse order of recording.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    order: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Node indices in the order backward visited them.
    pub fn visit_order(&self) -> &[usize] {
        &self.order
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn input_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.push_shared(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.require_2d("matmul")?;
        let (k2, p) = bv.require_2d("matmul")?;
        if k != k2 {
            return Err(Error::dim(format!("matmul {:?} x {:?}", av.shape(), bv.shape())));
        }
        let mut out = vec![0.0; m * p];
        kernels::matmul_acc(av.data(), bv.data(), &mut out, m, k, p);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, p], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, p) = av.require_2d("matmul_nt")?;
        let (k, p2) = bv.require_2d("matmul_nt")?;
        if p != p2 {
            return Err(Error::dim(format!("matmul_nt {:?} x {:?}ᵀ", av.shape(), bv.shape())));
        }
        let mut out = vec![0.0; m * k];
        kernels::matmul_nt_acc(av.data(), bv.data(), &mut out, m, p, k);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, k], out)?, Op::MatMulNt(a, b), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(format!("{name} {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds the vector `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let cols = av.cols();
        if bv.len() != cols {
            return Err(Error::dim(format!("add_row {:?} + {:?}", av.shape(), bv.shape())));
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(cols.max(1)) {
            for (x, &y) in row.iter_mut().zip(bv.data()) {
                *x += y;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::AddRow(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        let rg = self.rg(a);
        self.push(out, Op::Abs(a), rg)
    }

    /// Row-wise softmax over a matrix.
    pub fn softmax(&mut self, scores: Var) -> Result<Var> {
        self.softmax_impl(scores, None)
    }

    /// Row-wise softmax where `allow` (row-major, same shape as `scores`)
    /// selects the entries that participate. Disallowed outputs are exactly 0.
    pub fn masked_softmax(&mut self, scores: Var, allow: &[bool]) -> Result<Var> {
        self.softmax_impl(scores, Some(allow))
    }

    fn softmax_impl(&mut self, scores: Var, allow: Option<&[bool]>) -> Result<Var> {
        let sv = self.value(scores);
        let (rows, cols) = sv.require_2d("softmax")?;
        if let Some(a) = allow {
            if a.len() != rows * cols {
                return Err(Error::dim(format!(
                    "mask has {} entries, scores {:?}",
                    a.len(),
                    sv.shape()
                )));
            }
        }
        let mut out = vec![0.0; rows * cols];
        kernels::masked_softmax_rows(sv.data(), allow, &mut out, rows, cols)
            .map_err(|row| Error::InvalidMask(format!("row {row} has no allowed entry")))?;
        let rg = self.rg(scores);
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::Softmax(scores), rg))
    }

    /// Stride-1, same-length convolution with zero padding.
    /// `x` is `[t×c_in]`, `kernel` is `[k×c_in×c_out]`, `k` odd.
    pub fn conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        let (t, c_in) = xv.require_2d("conv1d input")?;
        if kv.shape().len() != 3 {
            return Err(Error::dim(format!("conv1d kernel must be k×c_in×c_out, got {:?}", kv.shape())));
        }
        let (k, kc_in, c_out) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
        if k % 2 == 0 {
            return Err(Error::config(format!("conv1d kernel size must be odd, got {k}")));
        }
        if kc_in != c_in {
            return Err(Error::dim(format!("conv1d input {:?} with kernel {:?}", xv.shape(), kv.shape())));
        }
        let mut out = vec![0.0; t * c_out];
        kernels::conv1d_acc(xv.data(), kv.data(), &mut out, t, c_in, c_out, k);
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(Tensor::new(vec![t, c_out], out)?, Op::Conv1d { x, kernel, k }, rg))
    }

    /// Per-row normalization followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if d == 0 || gv.len() != d || bv.len() != d {
            return Err(Error::dim(format!(
                "layer_norm x {:?}, gain {:?}, bias {:?}",
                xv.shape(),
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.require_2d("slice_cols")?;
        if start > end || end > cols {
            return Err(Error::dim(format!("slice {start}..{end} of {:?}", xv.shape())));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&xv.data()[r * cols + start..r * cols + end]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![rows, w], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_cols of nothing"));
        };
        let rows = self.value(first).require_2d("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).require_2d("concat_cols")?;
            if r != rows {
                return Err(Error::dim(format!(
                    "concat_cols {:?} vs {:?}",
                    self.value(first).shape(),
                    self.value(p).shape()
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Row `indices[r]` of `x` becomes row `r` of the output.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::Index { index: i, len: rows });
            }
            out.extend_from_slice(xv.row(i));
        }
        let rg = self.rg(x);
        let op = Op::GatherRows { x, indices: indices.to_vec() };
        Ok(self.push(Tensor::new(vec![indices.len(), cols], out)?, op, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = kernels::compensated_sum(self.value(x).data());
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = kernels::compensated_sum(v.data()) / v.len().max(1) as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(format!("backward needs a scalar, got {:?}", self.value(loss).shape())));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut order = Vec::new();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            order.push(i);
            let node = &self.nodes[i];
            let out = node.value.data();
            self.propagate(&node.op, out, &g, &mut grads);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|d| Tensor::new(self.nodes[i].value.shape().to_vec(), d).expect("grad shape")))
            .collect();
        Ok(Gradients { grads, order })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }

    fn propagate(&self, op: &Op, out: &[f64], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, p) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if let Some(da) = self.acc(grads, *a) {
                    kernels::matmul_nt_acc(g, bv.data(), da, m, p, k);
                }
                if let Some(db) = self.acc(grads, *b) {
                    kernels::matmul_tn_acc(av.data(), g, db, m, k, p);
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, p, k) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                if let Some(da) = self.acc(grads, *a) {
                    kernels::matmul_acc(g, bv.data(), da, m, k, p);
                }
                if let Some(db) = self.acc(grads, *b) {
                    kernels::matmul_tn_acc(g, av.data(), db, m, k, p);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
                if let Some(d) = self.acc(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        d[j] += g[j] * bv[j];
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for j in 0..g.len() {
                        d[j] += g[j] * av[j];
                    }
                }
            }
            Op::AddRow(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
                if let Some(d) = self.acc(grads, *b) {
                    let cols = d.len();
                    for row in g.chunks(cols.max(1)) {
                        d.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += c * g);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                if let Some(d) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        if x[j] > 0.0 {
                            d[j] += g[j];
                        }
                    }
                }
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                if let Some(d) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        if x[j] > 0.0 {
                            d[j] += g[j];
                        } else if x[j] < 0.0 {
                            d[j] -= g[j];
                        }
                    }
                }
            }
            Op::Softmax(s) => {
                let cols = self.value(*s).cols();
                if let Some(d) = self.acc(grads, *s) {
                    for ((y, gr), dr) in out.chunks(cols).zip(g.chunks(cols)).zip(d.chunks_mut(cols)) {
                        let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..cols {
                            dr[j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Conv1d { x, kernel, k } => {
                let (xv, kv) = (self.value(*x), self.value(*kernel));
                let (t, c_in, c_out) = (xv.shape()[0], xv.shape()[1], kv.shape()[2]);
                let mut dx = self.rg(*x).then(|| grads[x.0].take().unwrap_or_else(|| vec![0.0; xv.len()]));
                let dk = self.acc(grads, *kernel);
                kernels::conv1d_backward(xv.data(), kv.data(), g, dx.as_deref_mut(), dk, t, c_in, c_out, *k);
                if let Some(dx) = dx {
                    grads[x.0] = Some(dx);
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                let rows = xhat.len() / d;
                if let Some(dg) = self.acc(grads, *gain) {
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *bias) {
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    let n = d as f64;
                    for r in 0..rows {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_xh = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_xh += dh * xh[j];
                        }
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            dx[r * d + j] += inv_std[r] / n * (n * dh - sum_dh - xh[j] * sum_dh_xh);
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let cols = self.value(*x).cols();
                let w = g.len() / self.value(*x).rows().max(1);
                if let Some(d) = self.acc(grads, *x) {
                    for (r, gr) in g.chunks(w.max(1)).enumerate() {
                        for j in 0..w {
                            d[r * cols + start + j] += gr[j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let rows = self.value(parts[0]).rows();
                let total = g.len() / rows.max(1);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(d) = self.acc(grads, p) {
                        for r in 0..rows {
                            for j in 0..w {
                                d[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::GatherRows { x, indices } => {
                let cols = self.value(*x).cols();
                if let Some(d) = self.acc(grads, *x) {
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..cols {
                            d[i * cols + j] += g[r * cols + j];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    let scale = g[0] / d.len().max(1) as f64;
                    d.iter_mut().for_each(|d| *d += scale);
                }
            }
        }
    }
}
