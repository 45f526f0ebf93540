use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::par;

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-limit..=limit)).collect();
        Self { rows, cols, data }
    }

    pub fn random_uniform(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Rows selected by `index`, in that order.
    pub fn select_rows(&self, index: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(index.len() * self.cols);
        for &i in index {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: index.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }
}

fn check_same(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Dense product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul {}x{} · {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    let n = b.cols;
    par::for_each_row_mut(&mut out.data, n, |i, out_row| {
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * n..(k + 1) * n];
            for (o, bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    });
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose of a tall `a`.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::Shape(format!(
            "matmul_tn {}x{}ᵀ · {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    matmul(&a.transpose(), b)
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!(
            "matmul_nt {}x{} · {}x{}ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    matmul(a, &b.transpose())
}

pub fn add(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_same(a, b, "add")?;
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

/// Adds a `1 × cols` row vector to every row.
pub fn add_row(a: &Matrix, bias: &Matrix) -> Result<Matrix> {
    if bias.rows != 1 || bias.cols != a.cols {
        return Err(Error::Shape(format!(
            "bias {:?} for {:?} input",
            bias.shape(),
            a.shape()
        )));
    }
    let mut out = a.clone();
    for r in 0..out.rows {
        for (o, b) in out.row_mut(r).iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    Ok(out)
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

/// Inverted dropout. In training, each entry is zeroed with probability
/// `rate` (mask drawn from `seed`) and survivors are scaled by
/// `1 / (1 - rate)`; in evaluation the input is returned unchanged.
pub fn dropout(x: &Matrix, rate: f64, seed: u64, training: bool) -> Result<Matrix> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.data.len(), rate, seed);
    Ok(Matrix {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().zip(&mask).map(|(v, m)| v * m).collect(),
    })
}

/// Per-entry multipliers: 0 for dropped entries, `1 / (1 - rate)` for kept.
pub(crate) fn dropout_mask(len: usize, rate: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

/// Zero-padded "same" 1-D cross-correlation of every row with one shared
/// odd-length kernel: `y[c] = Σ_m w[m] · x[c + m - (k-1)/2]`.
pub fn conv1d_same(x: &Matrix, kernel: &[f64]) -> Result<Matrix> {
    if kernel.len().is_multiple_of(2) {
        return Err(Error::Shape(format!("kernel length {} is even", kernel.len())));
    }
    let pad = (kernel.len() / 2) as isize;
    let cols = x.cols;
    let mut out = Matrix::zeros(x.rows, cols);
    par::for_each_row_mut(&mut out.data, cols, |r, out_row| {
        let row = x.row(r);
        for (c, o) in out_row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (m, w) in kernel.iter().enumerate() {
                let src = c as isize + m as isize - pad;
                if src >= 0 && (src as usize) < cols {
                    acc += w * row[src as usize];
                }
            }
            *o = acc;
        }
    });
    Ok(out)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean negative log-likelihood of `labels` over the rows listed in `mask`,
/// plus the full probability matrix.
pub fn softmax_xent(logits: &Matrix, labels: &[u8], mask: &[usize]) -> Result<(f64, Matrix)> {
    if mask.is_empty() {
        return Err(Error::Shape("cross-entropy over an empty mask".into()));
    }
    if labels.len() != logits.rows {
        return Err(Error::Shape(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows
        )));
    }
    let probs = softmax_rows(logits);
    let mut total = 0.0;
    for &i in mask {
        let label = labels[i] as usize;
        if label >= logits.cols {
            return Err(Error::Domain(format!("label {label} out of range")));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    Ok((total / mask.len() as f64, probs))
}
