//! Reverse-mode tape.
//!
//! Every primitive appends a node holding its forward value and whatever it
//! needs for the backward rule. Nodes are only ever appended, so creation
//! order is a topological order and `backward` is a single reverse sweep.

use crate::error::{AutodiffError, Result};
use crate::gemm::gemm;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
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
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Gather(Var, Vec<usize>),
    Softmax(Var),
    LogSoftmax(Var),
    Sigmoid(Var),
    Softplus(Var),
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    Ln {
        x: Var,
        eps: Option<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batch: usize,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// A computation tape. One graph per forward/backward pass; graphs share no
/// state, so independent graphs may live on different threads.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_rows(x: &[f64], cols: usize, out: &mut [f64]) {
    for (src, dst) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            z += *d;
        }
        for d in dst.iter_mut() {
            *d /= z;
        }
    }
}

fn accumulate(node: &mut Node, f: impl FnOnce(&mut [f64])) {
    let n = node.value.numel();
    let g = node.grad.get_or_insert_with(|| vec![0.0; n]);
    f(g);
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
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds an input tensor. Gradients are only collected for leaves
    /// created with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient buffer of `v`, present once `backward` has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
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
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        node: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op, a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, node, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Element-wise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).row_len();
        if self.value(bias).numel() != cols {
            return Err(self.mismatch("add_row", x, bias));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(cols.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(r, c)| r + c))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(x, bias), rg))
    }

    /// Scales row `i` of `x` by `col[i]`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let rows = self.value(x).rows();
        let cols = self.value(x).row_len();
        if self.value(col).numel() != rows {
            return Err(self.mismatch("mul_col", x, col));
        }
        let c = self.value(col).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(cols.max(1))
            .zip(c)
            .flat_map(|(row, s)| row.iter().map(move |r| r * s))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(col);
        Ok(self.push(Tensor::new(shape, data)?, Op::MulCol(x, col), rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| scale * v + shift).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    /// Gathers rows of a 2-D `table`; used for embeddings and row selection.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(AutodiffError::Invalid(format!(
                "gather: table must be 2-D, got {:?}",
                t.shape()
            )));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "gather",
                    index: id,
                    rows,
                });
            }
            data.extend_from_slice(&t.data()[id * cols..(id + 1) * cols]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), cols], data)?,
            Op::Gather(table, ids.to_vec()),
            rg,
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut out = vec![0.0; t.numel()];
        softmax_rows(t.data(), t.row_len().max(1), &mut out);
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cols = t.row_len().max(1);
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks_exact(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| f(*v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Natural log; every input must be strictly positive.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if let Some((index, &value)) = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0))
        {
            return Err(AutodiffError::NonPositiveLog { index, value });
        }
        Ok(self.unary(x, f64::ln, Op::Ln { x, eps: None }))
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn ln_clamped(&mut self, x: Var, eps: f64) -> Var {
        self.unary(x, |v| v.max(eps).ln(), Op::Ln { x, eps: Some(eps) })
    }

    /// Per-row layer normalization with affine `gamma`/`beta` of row length.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let cols = self.value(x).row_len();
        if self.value(gamma).numel() != cols {
            return Err(self.mismatch("layer_norm", x, gamma));
        }
        if self.value(beta).numel() != cols {
            return Err(self.mismatch("layer_norm", x, beta));
        }
        let t = self.value(x);
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Vec::with_capacity(t.numel());
        let mut xhat = Vec::with_capacity(t.numel());
        let mut rstd = Vec::with_capacity(t.rows());
        for row in t.data().chunks_exact(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * gm[j] + bt[j]);
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[batch * nq, d]`, `k` and `v` are `[batch * nk, d]`; each
    /// example attends only within its own block of rows. No masking.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, batch: usize) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
            return Err(self.mismatch("attention", q, k));
        }
        if sk != sv {
            return Err(self.mismatch("attention", k, v));
        }
        let d = sq[1];
        if heads == 0 || d % heads != 0 || batch == 0 || sq[0] % batch != 0 || sk[0] % batch != 0 {
            return Err(AutodiffError::Invalid(format!(
                "attention: {heads} heads / batch {batch} incompatible with q {sq:?}, k {sk:?}"
            )));
        }
        let (nq, nk, dh) = (sq[0] / batch, sk[0] / batch, d / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; batch * heads * nq * nk];
        let mut out = vec![0.0; batch * nq * d];
        let mut scores = vec![0.0; nk];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..nq {
                    let qi = &qd[(b * nq + i) * d + off..][..dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &kd[(b * nk + j) * d + off..][..dh];
                        *s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                    }
                    let p = &mut probs[((b * heads + h) * nq + i) * nk..][..nk];
                    softmax_rows(&scores, nk, p);
                    let o = &mut out[(b * nq + i) * d + off..][..dh];
                    for (j, pj) in p.iter().enumerate() {
                        let vj = &vd[(b * nk + j) * d + off..][..dh];
                        for (oc, vc) in o.iter_mut().zip(vj) {
                            *oc += pj * vc;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::new(vec![batch * nq, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                batch,
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Back-propagates from a single-element `output`, accumulating into the
    /// gradient buffers of every node that requires a gradient.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).numel() != 1 {
            return Err(AutodiffError::NotScalar(self.shape(output).to_vec()));
        }
        if !self.rg(output) {
            return Ok(());
        }
        accumulate(&mut self.nodes[output.0], |g| g[0] += 1.0);
        for i in (0..=output.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = node.grad.take() else {
                continue;
            };
            backprop(before, node, &grad);
            node.grad = Some(grad);
        }
        Ok(())
    }
}

fn backprop(inputs: &mut [Node], node: &Node, dy: &[f64]) {
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (inputs[a.0].value.shape()[0], inputs[a.0].value.shape()[1]);
            let n = inputs[b.0].value.shape()[1];
            if inputs[a.0].requires_grad {
                let bd = inputs[b.0].value.data().to_vec();
                accumulate(&mut inputs[a.0], |g| gemm(m, n, k, dy, false, &bd, true, g, 1.0));
            }
            if inputs[b.0].requires_grad {
                let ad = inputs[a.0].value.data().to_vec();
                accumulate(&mut inputs[b.0], |g| gemm(k, m, n, &ad, true, dy, false, g, 1.0));
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if inputs[v.0].requires_grad {
                    accumulate(&mut inputs[v.0], |g| {
                        g.iter_mut().zip(dy).for_each(|(g, d)| *g += d)
                    });
                }
            }
        }
        Op::AddRow(x, bias) => {
            if inputs[x.0].requires_grad {
                accumulate(&mut inputs[x.0], |g| {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += d)
                });
            }
            if inputs[bias.0].requires_grad {
                let cols = node.value.row_len();
                accumulate(&mut inputs[bias.0], |g| {
                    for row in dy.chunks_exact(cols) {
                        g.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                });
            }
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (inputs[a.0].value.data().to_vec(), inputs[b.0].value.data().to_vec());
            if inputs[a.0].requires_grad {
                accumulate(&mut inputs[a.0], |g| {
                    for ((g, d), o) in g.iter_mut().zip(dy).zip(&bd) {
                        *g += d * o;
                    }
                });
            }
            if inputs[b.0].requires_grad {
                accumulate(&mut inputs[b.0], |g| {
                    for ((g, d), o) in g.iter_mut().zip(dy).zip(&ad) {
                        *g += d * o;
                    }
                });
            }
        }
        Op::MulCol(x, col) => {
            let cols = node.value.row_len().max(1);
            let cd = inputs[col.0].value.data().to_vec();
            if inputs[x.0].requires_grad {
                accumulate(&mut inputs[x.0], |g| {
                    for ((grow, drow), s) in g.chunks_exact_mut(cols).zip(dy.chunks_exact(cols)).zip(&cd) {
                        grow.iter_mut().zip(drow).for_each(|(g, d)| *g += d * s);
                    }
                });
            }
            if inputs[col.0].requires_grad {
                let xd = inputs[x.0].value.data().to_vec();
                accumulate(&mut inputs[col.0], |g| {
                    for ((gi, drow), xrow) in g.iter_mut().zip(dy.chunks_exact(cols)).zip(xd.chunks_exact(cols)) {
                        *gi += drow.iter().zip(xrow).map(|(d, x)| d * x).sum::<f64>();
                    }
                });
            }
        }
        Op::Affine(x, scale) => {
            if inputs[x.0].requires_grad {
                accumulate(&mut inputs[x.0], |g| {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += scale * d)
                });
            }
        }
        Op::Gather(table, ids) => {
            if inputs[table.0].requires_grad {
                let cols = node.value.row_len();
                accumulate(&mut inputs[table.0], |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &dy[r * cols..(r + 1) * cols];
                        g[id * cols..(id + 1) * cols]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(g, d)| *g += d);
                    }
                });
            }
        }
        Op::Softmax(x) => {
            if inputs[x.0].requires_grad {
                let cols = node.value.row_len().max(1);
                accumulate(&mut inputs[x.0], |g| {
                    for ((grow, drow), yrow) in g
                        .chunks_exact_mut(cols)
                        .zip(dy.chunks_exact(cols))
                        .zip(y.chunks_exact(cols))
                    {
                        let dot: f64 = drow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                        for ((g, d), y) in grow.iter_mut().zip(drow).zip(yrow) {
                            *g += y * (d - dot);
                        }
                    }
                });
            }
        }
        Op::LogSoftmax(x) => {
            if inputs[x.0].requires_grad {
                let cols = node.value.row_len().max(1);
                accumulate(&mut inputs[x.0], |g| {
                    for ((grow, drow), yrow) in g
                        .chunks_exact_mut(cols)
                        .zip(dy.chunks_exact(cols))
                        .zip(y.chunks_exact(cols))
                    {
                        let total: f64 = drow.iter().sum();
                        for ((g, d), y) in grow.iter_mut().zip(drow).zip(yrow) {
                            *g += d - y.exp() * total;
                        }
                    }
                });
            }
        }
        Op::Sigmoid(x) => unary_back(inputs, *x, dy, |i, _| y[i] * (1.0 - y[i])),
        Op::Softplus(x) => unary_back(inputs, *x, dy, |_, xv| sigmoid(xv)),
        Op::Tanh(x) => unary_back(inputs, *x, dy, |i, _| 1.0 - y[i] * y[i]),
        Op::Gelu(x) => unary_back(inputs, *x, dy, |_, xv| gelu_grad(xv)),
        Op::Relu(x) => unary_back(inputs, *x, dy, |_, xv| if xv > 0.0 { 1.0 } else { 0.0 }),
        Op::Ln { x, eps } => unary_back(inputs, *x, dy, |_, xv| match eps {
            Some(e) if xv <= *e => 0.0,
            _ => 1.0 / xv,
        }),
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let cols = node.value.row_len();
            let gm = inputs[gamma.0].value.data().to_vec();
            if inputs[x.0].requires_grad {
                accumulate(&mut inputs[x.0], |g| {
                    let n = cols as f64;
                    for (r, (grow, drow)) in g.chunks_exact_mut(cols).zip(dy.chunks_exact(cols)).enumerate() {
                        let hrow = &xhat[r * cols..(r + 1) * cols];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..cols {
                            let dh = drow[j] * gm[j];
                            s1 += dh;
                            s2 += dh * hrow[j];
                        }
                        for j in 0..cols {
                            let dh = drow[j] * gm[j];
                            grow[j] += rstd[r] / n * (n * dh - s1 - hrow[j] * s2);
                        }
                    }
                });
            }
            if inputs[gamma.0].requires_grad {
                accumulate(&mut inputs[gamma.0], |g| {
                    for (drow, hrow) in dy.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                        for j in 0..cols {
                            g[j] += drow[j] * hrow[j];
                        }
                    }
                });
            }
            if inputs[beta.0].requires_grad {
                accumulate(&mut inputs[beta.0], |g| {
                    for drow in dy.chunks_exact(cols) {
                        g.iter_mut().zip(drow).for_each(|(g, d)| *g += d);
                    }
                });
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            batch,
            probs,
        } => {
            let d = node.value.row_len();
            let (heads, batch) = (*heads, *batch);
            let nq = node.value.rows() / batch;
            let nk = inputs[k.0].value.rows() / batch;
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let qd = inputs[q.0].value.data();
            let kd = inputs[k.0].value.data();
            let vd = inputs[v.0].value.data();
            let mut dq = vec![0.0; qd.len()];
            let mut dk = vec![0.0; kd.len()];
            let mut dv = vec![0.0; vd.len()];
            let mut dp = vec![0.0; nk];
            for b in 0..batch {
                for h in 0..heads {
                    let off = h * dh;
                    for i in 0..nq {
                        let p = &probs[((b * heads + h) * nq + i) * nk..][..nk];
                        let doi = &dy[(b * nq + i) * d + off..][..dh];
                        for j in 0..nk {
                            let vj = &vd[(b * nk + j) * d + off..][..dh];
                            dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                            let dvj = &mut dv[(b * nk + j) * d + off..][..dh];
                            for (g, o) in dvj.iter_mut().zip(doi) {
                                *g += p[j] * o;
                            }
                        }
                        let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                        let qi = &qd[(b * nq + i) * d + off..][..dh];
                        for j in 0..nk {
                            let ds = p[j] * (dp[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let kj = &kd[(b * nk + j) * d + off..][..dh];
                            let dqi = &mut dq[(b * nq + i) * d + off..][..dh];
                            for (g, kv) in dqi.iter_mut().zip(kj) {
                                *g += ds * kv;
                            }
                            let dkj = &mut dk[(b * nk + j) * d + off..][..dh];
                            for (g, qv) in dkj.iter_mut().zip(qi) {
                                *g += ds * qv;
                            }
                        }
                    }
                }
            }
            for (var, gbuf) in [(q, dq), (k, dk), (v, dv)] {
                if inputs[var.0].requires_grad {
                    accumulate(&mut inputs[var.0], |g| {
                        g.iter_mut().zip(&gbuf).for_each(|(g, d)| *g += d)
                    });
                }
            }
        }
        Op::Sum(x) => {
            if inputs[x.0].requires_grad {
                accumulate(&mut inputs[x.0], |g| g.iter_mut().for_each(|g| *g += dy[0]));
            }
        }
        Op::Mean(x) => {
            if inputs[x.0].requires_grad {
                let n = inputs[x.0].value.numel().max(1) as f64;
                accumulate(&mut inputs[x.0], |g| g.iter_mut().for_each(|g| *g += dy[0] / n));
            }
        }
    }
}

fn unary_back(inputs: &mut [Node], x: Var, dy: &[f64], deriv: impl Fn(usize, f64) -> f64) {
    if !inputs[x.0].requires_grad {
        return;
    }
    let xd = inputs[x.0].value.data().to_vec();
    accumulate(&mut inputs[x.0], |g| {
        for (i, (g, d)) in g.iter_mut().zip(dy).enumerate() {
            *g += d * deriv(i, xd[i]);
        }
    });
}
