//! Matrix-valued reverse-mode differentiation.
//!
//! Operations are appended to a [`Tape`] as they are evaluated; node
//! indices are therefore already a topological order, and
//! [`Tape::backward`] walks them once in reverse, accumulating adjoints.

use std::sync::Arc;

use crate::error::{Error, Result};

use super::matrix::{self, Matrix};
use super::sparse::{self, CsrMatrix};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A sparse operator together with its transpose, for use on a tape.
#[derive(Debug, Clone)]
pub struct SparseOp {
    forward: Arc<CsrMatrix>,
    transpose: Arc<CsrMatrix>,
}

impl SparseOp {
    pub fn new(m: CsrMatrix) -> Self {
        let t = m.transpose();
        Self {
            forward: Arc::new(m),
            transpose: Arc::new(t),
        }
    }

    /// For matrices known to be symmetric; the transpose is shared.
    pub fn symmetric(m: CsrMatrix) -> Self {
        debug_assert!(m.is_symmetric());
        let m = Arc::new(m);
        Self {
            forward: m.clone(),
            transpose: m,
        }
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.forward
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Spmm(SparseOp, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    Dropout(Var, Vec<f64>),
    Conv1d(Var, Var),
    Attention(Box<AttentionCache>),
    SoftmaxXent(Box<XentCache>),
    Sum(Var),
}

struct AttentionCache {
    wh: Var,
    att: Var,
    nbhd: Arc<CsrMatrix>,
    /// Pre-activation scores and softmax weights, one per neighborhood entry.
    scores: Vec<f64>,
    alpha: Vec<f64>,
}

struct XentCache {
    logits: Var,
    labels: Vec<u8>,
    mask: Vec<usize>,
    probs: Matrix,
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

pub const LEAKY_SLOPE: f64 = 0.2;

fn leaky(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        LEAKY_SLOPE * z
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matrix::matmul(self.value(a), self.value(b))?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), g))
    }

    pub fn spmm(&mut self, op: &SparseOp, x: Var) -> Result<Var> {
        let value = sparse::spmm(op.matrix(), self.value(x))?;
        let g = self.grad_of(&[x]);
        Ok(self.push(value, Op::Spmm(op.clone(), x), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matrix::add(self.value(a), self.value(b))?;
        let g = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), g))
    }

    /// Adds a `1 × cols` row (bias) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = matrix::add_row(self.value(x), self.value(bias))?;
        let g = self.grad_of(&[x, bias]);
        Ok(self.push(value, Op::AddRow(x, bias), g))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = matrix::relu(self.value(x));
        let g = self.grad_of(&[x]);
        self.push(value, Op::Relu(x), g)
    }

    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let mask = matrix::dropout_mask(self.value(x).data().len(), rate, seed);
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Matrix::from_vec(src.rows(), src.cols(), data)?;
        let g = self.grad_of(&[x]);
        Ok(self.push(value, Op::Dropout(x, mask), g))
    }

    /// Row-wise same-padded convolution with a `1 × k` kernel variable.
    pub fn conv1d_same(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let k = self.value(kernel);
        if k.rows() != 1 {
            return Err(Error::Shape(format!("kernel must be 1 x k, got {:?}", k.shape())));
        }
        let value = matrix::conv1d_same(self.value(x), k.data())?;
        let g = self.grad_of(&[x, kernel]);
        Ok(self.push(value, Op::Conv1d(x, kernel), g))
    }

    /// Single-head graph attention aggregation.
    ///
    /// With `att = [a_self ‖ a_nbr]` (shape `1 × 2C`), node `i` scores each
    /// `j` in its closed neighborhood as
    /// `leaky_relu(a_self·wh_i + a_nbr·wh_j)`, softmax-normalizes the scores
    /// over the neighborhood and returns `Σ_j α_ij wh_j`.
    pub fn attention(&mut self, wh: Var, att: Var, nbhd: &Arc<CsrMatrix>) -> Result<Var> {
        let h = self.value(wh);
        let a = self.value(att);
        let c = h.cols();
        if a.shape() != (1, 2 * c) || nbhd.rows() != h.rows() || nbhd.cols() != h.rows() {
            return Err(Error::Shape(format!(
                "attention over {:?} features with {:?} weights and {}x{} neighborhoods",
                h.shape(),
                a.shape(),
                nbhd.rows(),
                nbhd.cols()
            )));
        }
        let (a_self, a_nbr) = a.data().split_at(c);
        let dot = |row: &[f64], w: &[f64]| row.iter().zip(w).map(|(x, y)| x * y).sum::<f64>();
        let s: Vec<f64> = (0..h.rows()).map(|i| dot(h.row(i), a_self)).collect();
        let t: Vec<f64> = (0..h.rows()).map(|i| dot(h.row(i), a_nbr)).collect();

        let mut scores = Vec::with_capacity(nbhd.nnz());
        let mut alpha = Vec::with_capacity(nbhd.nnz());
        let mut out = Matrix::zeros(h.rows(), c);
        for i in 0..h.rows() {
            let start = scores.len();
            scores.extend(nbhd.row(i).map(|(j, _)| s[i] + t[j]));
            let e: Vec<f64> = scores[start..].iter().map(|z| leaky(*z)).collect();
            let max = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = e.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let out_row = out.row_mut(i);
            for ((j, _), ex) in nbhd.row(i).zip(&exps) {
                let w = ex / total;
                alpha.push(w);
                for (o, x) in out_row.iter_mut().zip(h.row(j)) {
                    *o += w * x;
                }
            }
        }
        let g = self.grad_of(&[wh, att]);
        let cache = AttentionCache {
            wh,
            att,
            nbhd: nbhd.clone(),
            scores,
            alpha,
        };
        Ok(self.push(out, Op::Attention(Box::new(cache)), g))
    }

    /// Attention weights of the most recent evaluation of an attention
    /// node, aligned with its neighborhood pattern.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention(c) => Some(&c.alpha),
            _ => None,
        }
    }

    /// Masked mean cross-entropy; returns the scalar loss variable.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[u8], mask: &[usize]) -> Result<Var> {
        let (loss, probs) = matrix::softmax_xent(self.value(logits), labels, mask)?;
        let g = self.grad_of(&[logits]);
        let cache = XentCache {
            logits,
            labels: labels.to_vec(),
            mask: mask.to_vec(),
            probs,
        };
        Ok(self.push(Matrix::filled(1, 1, loss), Op::SoftmaxXent(Box::new(cache)), g))
    }

    /// Sum of all entries, as a `1 × 1` value.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let g = self.grad_of(&[x]);
        self.push(Matrix::filled(1, 1, s), Op::Sum(x), g)
    }

    /// Reverse accumulation from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let node = self
            .nodes
            .get(root.0)
            .ok_or_else(|| Error::Shape("backward from a value not recorded on this tape".into()))?;
        if node.value.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let mut acc = |v: Var, d: Matrix| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&d),
            slot @ None => *slot = Some(d),
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    acc(*a, matrix::matmul_nt(g, self.value(*b))?);
                }
                if self.needs(*b) {
                    acc(*b, matrix::matmul_tn(self.value(*a), g)?);
                }
            }
            Op::Spmm(op, x) => {
                if self.needs(*x) {
                    acc(*x, sparse::spmm(&op.transpose, g)?);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.clone());
                }
                if self.needs(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::AddRow(x, bias) => {
                if self.needs(*x) {
                    acc(*x, g.clone());
                }
                if self.needs(*bias) {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(*bias, db);
                }
            }
            Op::Relu(x) => {
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(d, y)| if *y > 0.0 { *d } else { 0.0 })
                    .collect();
                acc(*x, Matrix::from_vec(g.rows(), g.cols(), data)?);
            }
            Op::Dropout(x, mask) => {
                let data = g.data().iter().zip(mask).map(|(d, m)| d * m).collect();
                acc(*x, Matrix::from_vec(g.rows(), g.cols(), data)?);
            }
            Op::Conv1d(x, kernel) => {
                let input = self.value(*x);
                let w = self.value(*kernel).data();
                let pad = (w.len() / 2) as isize;
                let cols = input.cols() as isize;
                if self.needs(*x) {
                    // Adjoint of cross-correlation: correlate with the
                    // reversed kernel.
                    let flipped: Vec<f64> = w.iter().rev().copied().collect();
                    acc(*x, matrix::conv1d_same(g, &flipped)?);
                }
                if self.needs(*kernel) {
                    let mut dw = Matrix::zeros(1, w.len());
                    for r in 0..input.rows() {
                        let (xr, gr) = (input.row(r), g.row(r));
                        for (m, d) in dw.data_mut().iter_mut().enumerate() {
                            let shift = m as isize - pad;
                            let mut s = 0.0;
                            for c in 0..cols {
                                let src = c + shift;
                                if src >= 0 && src < cols {
                                    s += xr[src as usize] * gr[c as usize];
                                }
                            }
                            *d += s;
                        }
                    }
                    acc(*kernel, dw);
                }
            }
            Op::Attention(cache) => {
                let (dwh, datt) = self.attention_backward(cache, g);
                if self.needs(cache.wh) {
                    acc(cache.wh, dwh);
                }
                if self.needs(cache.att) {
                    acc(cache.att, datt);
                }
            }
            Op::SoftmaxXent(cache) => {
                let scale = g.data()[0] / cache.mask.len() as f64;
                let mut d = Matrix::zeros(cache.probs.rows(), cache.probs.cols());
                for &i in &cache.mask {
                    let label = cache.labels[i] as usize;
                    for (c, v) in d.row_mut(i).iter_mut().enumerate() {
                        let target = if c == label { 1.0 } else { 0.0 };
                        *v += scale * (cache.probs.get(i, c) - target);
                    }
                }
                acc(cache.logits, d);
            }
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                acc(*x, Matrix::filled(r, c, g.data()[0]));
            }
        }
        Ok(())
    }

    fn attention_backward(&self, cache: &AttentionCache, g: &Matrix) -> (Matrix, Matrix) {
        let h = self.value(cache.wh);
        let a = self.value(cache.att).data();
        let (n, c) = h.shape();
        let (a_self, a_nbr) = a.split_at(c);
        let mut dwh = Matrix::zeros(n, c);
        let mut ds = vec![0.0; n];
        let mut dt = vec![0.0; n];
        let mut k = 0;
        for i in 0..n {
            let len = cache.nbhd.row_len(i);
            let entries: Vec<usize> = cache.nbhd.row(i).map(|(j, _)| j).collect();
            let alpha = &cache.alpha[k..k + len];
            let scores = &cache.scores[k..k + len];
            // out_i = Σ α_ij wh_j
            let dalpha: Vec<f64> = entries
                .iter()
                .map(|&j| g.row(i).iter().zip(h.row(j)).map(|(x, y)| x * y).sum())
                .collect();
            for (&j, w) in entries.iter().zip(alpha) {
                for (d, gv) in dwh.row_mut(j).iter_mut().zip(g.row(i)) {
                    *d += w * gv;
                }
            }
            let weighted: f64 = alpha.iter().zip(&dalpha).map(|(w, d)| w * d).sum();
            for ((&j, (w, da)), z) in entries.iter().zip(alpha.iter().zip(&dalpha)).zip(scores) {
                let de = w * (da - weighted);
                let dz = if *z > 0.0 { de } else { LEAKY_SLOPE * de };
                ds[i] += dz;
                dt[j] += dz;
            }
            k += len;
        }
        let mut datt = Matrix::zeros(1, 2 * c);
        for i in 0..n {
            let row = h.row(i);
            for col in 0..c {
                dwh.row_mut(i)[col] += ds[i] * a_self[col] + dt[i] * a_nbr[col];
                datt.data_mut()[col] += ds[i] * row[col];
                datt.data_mut()[c + col] += dt[i] * row[col];
            }
        }
        (dwh, datt)
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; `None` when `v` does not
    /// influence the root.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but materializes zeros for disconnected values.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| {
            let (r, c) = tape.value(v).shape();
            Matrix::zeros(r, c)
        })
    }
}
