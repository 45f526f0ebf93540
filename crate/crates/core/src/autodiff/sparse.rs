use crate::error::{Error, Result};
use crate::par;

use super::matrix::Matrix;

/// Compressed-row sparse matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed and
    /// columns within a row end up sorted.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        if let Some(&(r, c, _)) = triplets.iter().find(|(r, c, _)| *r >= rows || *c >= cols) {
            return Err(Error::Shape(format!("entry ({r}, {c}) outside {rows}x{cols}")));
        }
        triplets.sort_by_key(|t| (t.0, t.1));
        let mut indptr = vec![0; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for i in 0..rows {
            indptr[i + 1] += indptr[i];
        }
        Ok(Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(column, value)` pairs of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn row_len(&self, r: usize) -> usize {
        self.indptr[r + 1] - self.indptr[r]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|(j, _)| *j == c).map_or(0.0, |(_, v)| v)
    }

    pub fn transpose(&self) -> CsrMatrix {
        let triplets = (0..self.rows)
            .flat_map(|r| self.row(r).map(move |(c, v)| (c, r, v)))
            .collect();
        CsrMatrix::from_triplets(self.cols, self.rows, triplets).expect("transpose stays in bounds")
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                m.set(r, c, v);
            }
        }
        m
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols && (0..self.rows).all(|r| self.row(r).all(|(c, v)| self.get(c, r) == v))
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}`: symmetric, with every diagonal present.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdjacency(CsrMatrix);

impl SparseAdjacency {
    pub fn matrix(&self) -> &CsrMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> CsrMatrix {
        self.0
    }

    pub fn num_nodes(&self) -> usize {
        self.0.rows
    }
}

fn check_edges(edges: &[(usize, usize)], n: usize) -> Result<()> {
    for &(s, d) in edges {
        if s >= n || d >= n {
            return Err(Error::Shape(format!("edge ({s}, {d}) endpoint outside 0..{n}")));
        }
    }
    Ok(())
}

/// 0/1 symmetric adjacency pattern (self-loops dropped), as sorted unique
/// neighbor lists.
fn neighbor_lists(edges: &[(usize, usize)], n: usize) -> Vec<Vec<usize>> {
    let mut nbrs = vec![Vec::new(); n];
    for &(s, d) in edges {
        if s != d {
            nbrs[s].push(d);
            nbrs[d].push(s);
        }
    }
    for l in &mut nbrs {
        l.sort_unstable();
        l.dedup();
    }
    nbrs
}

/// Renormalized adjacency with self-loops.
pub fn normalize_adjacency(edges: &[(usize, usize)], n: usize) -> Result<SparseAdjacency> {
    check_edges(edges, n)?;
    let nbrs = neighbor_lists(edges, n);
    let inv_sqrt_deg: Vec<f64> = nbrs.iter().map(|l| 1.0 / ((l.len() + 1) as f64).sqrt()).collect();
    let mut triplets = Vec::with_capacity(n + nbrs.iter().map(Vec::len).sum::<usize>());
    for (i, l) in nbrs.iter().enumerate() {
        triplets.push((i, i, inv_sqrt_deg[i] * inv_sqrt_deg[i]));
        for &j in l {
            triplets.push((i, j, inv_sqrt_deg[i] * inv_sqrt_deg[j]));
        }
    }
    Ok(SparseAdjacency(CsrMatrix::from_triplets(n, n, triplets)?))
}

/// Row-normalized adjacency without self-loops: row `i` averages the
/// neighbors of `i`; isolated nodes get an empty row.
pub fn mean_adjacency(edges: &[(usize, usize)], n: usize) -> Result<CsrMatrix> {
    check_edges(edges, n)?;
    let nbrs = neighbor_lists(edges, n);
    let triplets = nbrs
        .iter()
        .enumerate()
        .flat_map(|(i, l)| {
            let w = 1.0 / l.len() as f64;
            l.iter().map(move |&j| (i, j, w))
        })
        .collect();
    CsrMatrix::from_triplets(n, n, triplets)
}

/// Closed neighborhoods `N(i) ∪ {i}` as a 0/1 pattern (values are 1).
pub fn closed_neighborhoods(edges: &[(usize, usize)], n: usize) -> Result<CsrMatrix> {
    check_edges(edges, n)?;
    let nbrs = neighbor_lists(edges, n);
    let triplets = nbrs
        .iter()
        .enumerate()
        .flat_map(|(i, l)| std::iter::once((i, i, 1.0)).chain(l.iter().map(move |&j| (i, j, 1.0))))
        .collect();
    CsrMatrix::from_triplets(n, n, triplets)
}

/// Sparse-dense product.
pub fn spmm(a: &CsrMatrix, h: &Matrix) -> Result<Matrix> {
    if a.cols != h.rows() {
        return Err(Error::Shape(format!(
            "spmm {}x{} · {}x{}",
            a.rows,
            a.cols,
            h.rows(),
            h.cols()
        )));
    }
    let cols = h.cols();
    let mut out = Matrix::zeros(a.rows, cols);
    par::for_each_row_mut(out.data_mut(), cols, |i, out_row| {
        for (j, v) in a.row(i) {
            for (o, x) in out_row.iter_mut().zip(h.row(j)) {
                *o += v * x;
            }
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::matrix::matmul;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_edges(n: usize, p: f64, seed: u64) -> Vec<(usize, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut e = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < p {
                    e.push((i, j));
                    e.push((j, i));
                }
            }
        }
        e
    }

    /// Dense D^{-1/2}(A+I)D^{-1/2}, computed with plain loops.
    fn dense_renormalized(edges: &[(usize, usize)], n: usize) -> Matrix {
        let mut a = Matrix::identity(n);
        for &(s, d) in edges {
            a.set(s, d, 1.0);
            a.set(d, s, 1.0);
        }
        let deg: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum()).collect();
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                out.set(i, j, a.get(i, j) / (deg[i].sqrt() * deg[j].sqrt()));
            }
        }
        out
    }

    #[test]
    fn small_cases() {
        let a = normalize_adjacency(&[], 1).unwrap();
        assert_eq!(a.matrix().to_dense(), Matrix::identity(1));
        let a = normalize_adjacency(&[(0, 1), (1, 0)], 2).unwrap();
        let half = Matrix::filled(2, 2, 0.5);
        assert!(a.matrix().to_dense().max_abs_diff(&half) < 1e-15);
        assert!(normalize_adjacency(&[(0, 2)], 2).is_err());
    }

    #[test]
    fn matches_dense_oracle() {
        let edges = random_edges(10, 0.3, 5);
        let a = normalize_adjacency(&edges, 10).unwrap();
        assert!(a.matrix().is_symmetric());
        assert!((0..10).all(|i| a.matrix().get(i, i) > 0.0));
        assert!(a.matrix().to_dense().max_abs_diff(&dense_renormalized(&edges, 10)) < 1e-12);
    }

    #[test]
    fn spmm_cases() {
        let h = Matrix::random_uniform(6, 3, -1.0, 1.0, 1);
        let id = normalize_adjacency(&[], 6).unwrap();
        assert_eq!(spmm(id.matrix(), &h).unwrap(), h);

        let a = normalize_adjacency(&[(0, 1)], 2).unwrap();
        let out = spmm(a.matrix(), &Matrix::identity(2)).unwrap();
        assert!(out.max_abs_diff(&Matrix::filled(2, 2, 0.5)) < 1e-15);

        let edges = random_edges(15, 0.25, 9);
        let a = normalize_adjacency(&edges, 15).unwrap();
        let h = Matrix::random_uniform(15, 4, -2.0, 2.0, 2);
        let dense = matmul(&a.matrix().to_dense(), &h).unwrap();
        assert!(spmm(a.matrix(), &h).unwrap().max_abs_diff(&dense) < 1e-12);
        assert!(spmm(a.matrix(), &Matrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn spmm_is_permutation_equivariant() {
        let n = 12;
        let edges = random_edges(n, 0.3, 17);
        let h = Matrix::random_uniform(n, 5, -1.0, 1.0, 3);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        // Node i becomes node perm[i].
        let p_edges: Vec<_> = edges.iter().map(|&(s, d)| (perm[s], perm[d])).collect();
        let mut inv = vec![0; n];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let ph = h.select_rows(&inv);
        let a = normalize_adjacency(&edges, n).unwrap();
        let pa = normalize_adjacency(&p_edges, n).unwrap();
        let lhs = spmm(a.matrix(), &h).unwrap().select_rows(&inv);
        let rhs = spmm(pa.matrix(), &ph).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn mean_adjacency_rows() {
        let m = mean_adjacency(&[(0, 1), (0, 2)], 4).unwrap();
        assert_eq!(m.get(0, 1), 0.5);
        assert_eq!(m.get(1, 0), 1.0);
        assert_eq!(m.row_len(3), 0);
        let t = m.transpose();
        assert_eq!(t.get(1, 0), 0.5);
        let c = closed_neighborhoods(&[(0, 1)], 3).unwrap();
        assert_eq!(c.row(0).map(|(j, _)| j).collect::<Vec<_>>(), [0, 1]);
        assert_eq!(c.row(2).map(|(j, _)| j).collect::<Vec<_>>(), [2]);
    }
}
