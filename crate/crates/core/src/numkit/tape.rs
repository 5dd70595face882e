//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Forward calls append nodes in evaluation order; `backward` walks them in
//! exactly the reverse order and returns a fresh set of gradients, leaving the
//! recorded forward values untouched.

use super::optim::{ParamId, ParamStore};
use super::tensor::{
    gelu_grad_scalar, gelu_scalar, gemm_nn, gemm_nt, gemm_tn, row_stats, sigmoid_scalar,
    softmax_rows_masked, softplus, Tensor,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: Vec<(f64, f64)>,
    },
    Gather(Var, Vec<usize>),
    SumRows(Var, Vec<bool>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    Max(Var, usize),
    BceLogit {
        logit: Var,
        label: f64,
        clamped: bool,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

/// Largest logit magnitude kept by the clamped BCE, `ln((1 - 1e-7) / 1e-7)`.
pub const BCE_LOGIT_CLAMP: f64 = 16.118_095_550_958_31;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`; later `Var`s become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Records a trainable leaf holding a copy of the parameter's current value.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradients without being tied to a parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a * b^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::tensor::matmul_bt(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulBt(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).dims2(), self.value(b).dims2());
        if sa != sb {
            return Err(Error::dims(op, self.value(a).shape(), self.value(b).shape()));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.binary(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.binary(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.binary(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a `[1, c]` (or `[c]`) row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if self.value(row).len() != c {
            return Err(Error::dims("add_row", self.value(a).shape(), self.value(row).shape()));
        }
        let mut out = self.value(a).clone();
        let rv = self.value(row).data().to_vec();
        for i in 0..r {
            for (o, b) in out.row_mut(i).iter_mut().zip(&rv) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// `scale * a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(a).map(|x| scale * x + shift);
        let rg = self.rg(a);
        self.push(out, Op::Affine(a, scale), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid_scalar);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu_scalar);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Row softmax; `mask[j] == false` excludes column `j` (probability 0).
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let x = self.value(a);
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax_rows"));
        }
        if let Some(m) = mask {
            if m.len() != x.cols() {
                return Err(Error::dims("softmax_rows", x.shape(), &[m.len()]));
            }
        }
        let out = softmax_rows_masked(x, mask);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let out = super::tensor::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        let stats = row_stats(self.value(x), eps);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
            rg,
        ))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = self.value(table).gather_rows(ids)?;
        let rg = self.rg(table);
        Ok(self.push(out, Op::Gather(table, ids.to_vec()), rg))
    }

    /// Column-wise sum over rows with `keep[i] == true`, giving `[1, c]`.
    pub fn sum_rows(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims2();
        if keep.len() != r {
            return Err(Error::dims("sum_rows", x.shape(), &[keep.len()]));
        }
        let mut out = vec![0.0; c];
        for (i, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
            for (o, v) in out.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(1, c, out)?, Op::SumRows(a, keep.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims2();
        if width == 0 || start + width > c {
            return Err(Error::dims("slice_cols", x.shape(), &[start, width]));
        }
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&x.row(i)[start..start + width]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(r, width, out)?, Op::SliceCols(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(Error::dims("concat_cols", self.value(parts[0]).shape(), &[]));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(r, total, out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let loss = super::tensor::cross_entropy_logits(self.value(logits), targets)?;
        let probs = softmax_rows_masked(self.value(logits), None);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Maximum element; the gradient flows to the first argmax only.
    pub fn max(&mut self, a: Var) -> Var {
        let (idx, m) = self
            .value(a)
            .data()
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bm), (i, v)| if v > bm { (i, v) } else { (bi, bm) });
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Max(a, idx), rg)
    }

    /// Binary cross-entropy of `sigmoid(logit)` against `label`, with the
    /// probability clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce_logit(&mut self, logit: Var, label: f64) -> Var {
        let s = self.value(logit).item();
        let clamped = s.abs() > BCE_LOGIT_CLAMP;
        let s = s.clamp(-BCE_LOGIT_CLAMP, BCE_LOGIT_CLAMP);
        let loss = softplus(s) - label * s;
        let rg = self.rg(logit);
        self.push(
            Tensor::scalar(loss),
            Op::BceLogit {
                logit,
                label,
                clamped,
            },
            rg,
        )
    }

    /// Gradients of the scalar `loss` with respect to every node that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dims("backward", self.value(loss).shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let like = |v: Var, data: Vec<f64>| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), data).expect("gradient shape")
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).cols();
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(g.data(), val(*b).data(), &mut ga, m, n, k);
                    acc(*a, like(*a, ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(val(*a).data(), g.data(), &mut gb, m, k, n);
                    acc(*b, like(*b, gb));
                }
            }
            Op::MatMulBt(a, b) => {
                // out[m,n] = a[m,k] b[n,k]^T
                let (m, k) = val(*a).dims2();
                let n = val(*b).rows();
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nn(g.data(), val(*b).data(), &mut ga, m, n, k);
                    acc(*a, like(*a, ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; n * k];
                    gemm_tn(g.data(), val(*a).data(), &mut gb, m, n, k);
                    acc(*b, like(*b, gb));
                }
            }
            Op::Add(a, b) => {
                acc(*a, like(*a, g.data().to_vec()));
                acc(*b, like(*b, g.data().to_vec()));
            }
            Op::Sub(a, b) => {
                acc(*a, like(*a, g.data().to_vec()));
                acc(*b, like(*b, g.data().iter().map(|x| -x).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if self.rg(*a) {
                    acc(*a, like(*a, g.data().iter().zip(bv).map(|(x, y)| x * y).collect()));
                }
                if self.rg(*b) {
                    acc(*b, like(*b, g.data().iter().zip(av).map(|(x, y)| x * y).collect()));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, like(*a, g.data().to_vec()));
                if self.rg(*row) {
                    let c = g.cols();
                    let mut gr = vec![0.0; c];
                    for i in 0..g.rows() {
                        for (o, v) in gr.iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(*row, like(*row, gr));
                }
            }
            Op::Affine(a, s) => acc(*a, like(*a, g.data().iter().map(|x| x * s).collect())),
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, like(*a, g.data().iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()));
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(*a, like(*a, g.data().iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect()));
            }
            Op::Gelu(a) => {
                let x = val(*a).data();
                acc(*a, like(*a, g.data().iter().zip(x).map(|(g, &x)| g * gelu_grad_scalar(x)).collect()));
            }
            Op::Softmax(a) => {
                let (r, c) = node.value.dims2();
                let y = node.value.data();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        ga[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, like(*a, ga));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let (r, c) = val(*x).dims2();
                let xv = val(*x).data();
                let gv = val(*gain).data();
                let mut gx = vec![0.0; r * c];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                let mut xhat = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for (i, &(mean, rstd)) in stats.iter().enumerate() {
                    let gr = &g.data()[i * c..(i + 1) * c];
                    for j in 0..c {
                        xhat[j] = (xv[i * c + j] - mean) * rstd;
                        dxhat[j] = gr[j] * gv[j];
                        gg[j] += gr[j] * xhat[j];
                        gb[j] += gr[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        gx[i * c + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                acc(*x, like(*x, gx));
                acc(*gain, like(*gain, gg));
                acc(*bias, like(*bias, gb));
            }
            Op::Gather(table, ids) => {
                if self.rg(*table) {
                    let c = val(*table).cols();
                    let mut gt = vec![0.0; val(*table).len()];
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, v) in gt[id * c..(id + 1) * c].iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(*table, like(*table, gt));
                }
            }
            Op::SumRows(a, keep) => {
                let c = g.len();
                let mut ga = vec![0.0; keep.len() * c];
                for (i, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
                    ga[i * c..(i + 1) * c].copy_from_slice(g.data());
                }
                acc(*a, like(*a, ga));
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).dims2();
                let w = g.cols();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    ga[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                }
                acc(*a, like(*a, ga));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, w) = val(p).dims2();
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            gp.extend_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        acc(p, like(p, gp));
                    }
                    offset += w;
                }
            }
            Op::Sum(a) => {
                let s = g.item();
                acc(*a, like(*a, vec![s; val(*a).len()]));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let m = targets.len() as f64;
                let s = g.item() / m;
                let mut gl = probs.data().to_vec();
                let c = probs.cols();
                for (i, &t) in targets.iter().enumerate() {
                    gl[i * c + t] -= 1.0;
                }
                gl.iter_mut().for_each(|v| *v *= s);
                acc(*logits, like(*logits, gl));
            }
            Op::Max(a, idx) => {
                let mut ga = vec![0.0; val(*a).len()];
                ga[*idx] = g.item();
                acc(*a, like(*a, ga));
            }
            Op::BceLogit {
                logit,
                label,
                clamped,
            } => {
                let d = if *clamped {
                    0.0
                } else {
                    sigmoid_scalar(val(*logit).item()) - label
                };
                acc(*logit, like(*logit, vec![g.item() * d]));
            }
        }
    }

    /// Leaf nodes that carry a parameter id, in recording order.
    pub(crate) fn param_leaves(&self) -> impl Iterator<Item = (Var, ParamId)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (Var(i), p)))
    }
}

impl Gradients {
    /// Adds the gradients of every parameter leaf into the store's grad buffers.
    pub fn accumulate_into(&self, tape: &Tape, store: &mut ParamStore) {
        for (v, id) in tape.param_leaves() {
            if let Some(g) = self.get(v) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}
