//! Compressed sparse column matrices and the few kernels the solver needs.

use serde::{Deserialize, Serialize};

/// Sparse matrix in compressed-sparse-column form.
///
/// Column `j` owns the index range `indptr[j]..indptr[j+1]`; row indices within
/// a column are strictly increasing and duplicates are summed at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CscMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub data: Vec<f64>,
}

impl CscMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        CscMatrix {
            nrows,
            ncols,
            indptr: vec![0; ncols + 1],
            indices: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        CscMatrix {
            nrows: n,
            ncols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            data: vec![1.0; n],
        }
    }

    /// Build from (row, col, value) triplets; duplicates are summed, explicit
    /// zeros are kept so the sparsity pattern is caller-controlled.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut count = vec![0usize; ncols];
        for &(r, c, _) in triplets {
            debug_assert!(r < nrows && c < ncols, "triplet ({r},{c}) out of bounds");
            count[c] += 1;
        }
        let mut indptr = vec![0usize; ncols + 1];
        for j in 0..ncols {
            indptr[j + 1] = indptr[j] + count[j];
        }
        let mut indices = vec![0usize; triplets.len()];
        let mut data = vec![0.0; triplets.len()];
        let mut next = indptr.clone();
        for &(r, c, v) in triplets {
            let p = next[c];
            indices[p] = r;
            data[p] = v;
            next[c] += 1;
        }
        // sort rows within each column, then merge duplicates
        let mut mat = CscMatrix {
            nrows,
            ncols,
            indptr,
            indices,
            data,
        };
        mat.sort_and_dedup();
        mat
    }

    fn sort_and_dedup(&mut self) {
        let mut indptr = vec![0usize; self.ncols + 1];
        let mut indices = Vec::with_capacity(self.indices.len());
        let mut data = Vec::with_capacity(self.data.len());
        let mut col: Vec<(usize, f64)> = Vec::new();
        for j in 0..self.ncols {
            col.clear();
            for p in self.indptr[j]..self.indptr[j + 1] {
                col.push((self.indices[p], self.data[p]));
            }
            col.sort_unstable_by_key(|&(r, _)| r);
            let mut k = 0;
            while k < col.len() {
                let r = col[k].0;
                let mut v = col[k].1;
                let mut k2 = k + 1;
                while k2 < col.len() && col[k2].0 == r {
                    v += col[k2].1;
                    k2 += 1;
                }
                indices.push(r);
                data.push(v);
                k = k2;
            }
            indptr[j + 1] = indices.len();
        }
        self.indptr = indptr;
        self.indices = indices;
        self.data = data;
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// y += A x
    pub fn axpy(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for j in 0..self.ncols {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            for p in self.indptr[j]..self.indptr[j + 1] {
                y[self.indices[p]] += self.data[p] * xj;
            }
        }
    }

    /// y += Aᵀ x
    pub fn atxpy(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.nrows);
        debug_assert_eq!(y.len(), self.ncols);
        for j in 0..self.ncols {
            let mut acc = 0.0;
            for p in self.indptr[j]..self.indptr[j + 1] {
                acc += self.data[p] * x[self.indices[p]];
            }
            y[j] += acc;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.axpy(x, &mut y);
        y
    }

    pub fn mul_vec_t(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.ncols];
        self.atxpy(x, &mut y);
        y
    }

    pub fn transpose(&self) -> CscMatrix {
        let mut count = vec![0usize; self.nrows];
        for &r in &self.indices {
            count[r] += 1;
        }
        let mut indptr = vec![0usize; self.nrows + 1];
        for i in 0..self.nrows {
            indptr[i + 1] = indptr[i] + count[i];
        }
        let mut next = indptr.clone();
        let mut indices = vec![0usize; self.nnz()];
        let mut data = vec![0.0; self.nnz()];
        for j in 0..self.ncols {
            for p in self.indptr[j]..self.indptr[j + 1] {
                let r = self.indices[p];
                let q = next[r];
                indices[q] = j;
                data[q] = self.data[p];
                next[r] += 1;
            }
        }
        CscMatrix {
            nrows: self.ncols,
            ncols: self.nrows,
            indptr,
            indices,
            data,
        }
    }

    /// Stack `self` on top of `other` (column counts must match).
    pub fn vstack(&self, other: &CscMatrix) -> CscMatrix {
        assert_eq!(self.ncols, other.ncols);
        let ncols = self.ncols;
        let nrows = self.nrows + other.nrows;
        let mut indptr = vec![0usize; ncols + 1];
        let mut indices = Vec::with_capacity(self.nnz() + other.nnz());
        let mut data = Vec::with_capacity(self.nnz() + other.nnz());
        for j in 0..ncols {
            for p in self.indptr[j]..self.indptr[j + 1] {
                indices.push(self.indices[p]);
                data.push(self.data[p]);
            }
            for p in other.indptr[j]..other.indptr[j + 1] {
                indices.push(other.indices[p] + self.nrows);
                data.push(other.data[p]);
            }
            indptr[j + 1] = indices.len();
        }
        CscMatrix {
            nrows,
            ncols,
            indptr,
            indices,
            data,
        }
    }

    /// A ← diag(r) · A, in place.
    pub fn scale_rows(&mut self, r: &[f64]) {
        debug_assert_eq!(r.len(), self.nrows);
        for p in 0..self.data.len() {
            self.data[p] *= r[self.indices[p]];
        }
    }

    /// A ← A · diag(c), in place.
    pub fn scale_cols(&mut self, c: &[f64]) {
        debug_assert_eq!(c.len(), self.ncols);
        for j in 0..self.ncols {
            for p in self.indptr[j]..self.indptr[j + 1] {
                self.data[p] *= c[j];
            }
        }
    }

    /// Infinity norm of each column.
    pub fn col_inf_norms(&self) -> Vec<f64> {
        let mut out = vec![0.0f64; self.ncols];
        for j in 0..self.ncols {
            for p in self.indptr[j]..self.indptr[j + 1] {
                out[j] = out[j].max(self.data[p].abs());
            }
        }
        out
    }

    /// Infinity norm of each row.
    pub fn row_inf_norms(&self) -> Vec<f64> {
        let mut out = vec![0.0f64; self.nrows];
        for p in 0..self.data.len() {
            let r = self.indices[p];
            out[r] = out[r].max(self.data[p].abs());
        }
        out
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.nrows, self.ncols);
        for j in 0..self.ncols {
            for p in self.indptr[j]..self.indptr[j + 1] {
                m[(self.indices[p], j)] += self.data[p];
            }
        }
        m
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.ncols).flat_map(move |j| {
            (self.indptr[j]..self.indptr[j + 1]).map(move |p| (self.indices[p], j, self.data[p]))
        })
    }
}

/// Row-oriented triplet accumulator used while assembling constraint matrices.
#[derive(Debug, Clone, Default)]
pub struct TripletBuilder {
    pub nrows: usize,
    pub ncols: usize,
    pub entries: Vec<(usize, usize, f64)>,
    pub rhs: Vec<f64>,
}

impl TripletBuilder {
    pub fn new(ncols: usize) -> Self {
        TripletBuilder {
            nrows: 0,
            ncols,
            entries: Vec::new(),
            rhs: Vec::new(),
        }
    }

    /// Append one row given its nonzeros and right-hand side; returns the row index.
    pub fn push_row(&mut self, cols: &[(usize, f64)], rhs: f64) -> usize {
        let r = self.nrows;
        for &(c, v) in cols {
            debug_assert!(c < self.ncols);
            if v != 0.0 {
                self.entries.push((r, c, v));
            }
        }
        self.rhs.push(rhs);
        self.nrows += 1;
        r
    }

    pub fn build(&self) -> CscMatrix {
        CscMatrix::from_triplets(self.nrows, self.ncols, &self.entries)
    }
}

pub fn inf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |a, &b| a.max(b.abs()))
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates_and_sort() {
        let a = CscMatrix::from_triplets(3, 2, &[(2, 0, 1.0), (0, 0, 2.0), (2, 0, 0.5), (1, 1, 3.0)]);
        assert_eq!(a.nnz(), 3);
        assert_eq!(a.indices, vec![0, 2, 1]);
        assert_eq!(a.data, vec![2.0, 1.5, 3.0]);
    }

    #[test]
    fn matvec_and_transpose_agree_with_dense() {
        let a = CscMatrix::from_triplets(
            3,
            4,
            &[(0, 0, 1.0), (1, 0, -2.0), (2, 3, 4.0), (0, 2, 5.0), (1, 2, 0.5)],
        );
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = a.mul_vec(&x);
        let d = a.to_dense();
        for i in 0..3 {
            let want: f64 = (0..4).map(|j| d[(i, j)] * x[j]).sum();
            assert!((y[i] - want).abs() < 1e-14);
        }
        let at = a.transpose();
        let z = [1.0, -1.0, 2.0];
        let yt = a.mul_vec_t(&z);
        let yt2 = at.mul_vec(&z);
        for j in 0..4 {
            assert!((yt[j] - yt2[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn vstack_layout() {
        let a = CscMatrix::identity(2);
        let b = CscMatrix::from_triplets(1, 2, &[(0, 0, 3.0), (0, 1, 4.0)]);
        let s = a.vstack(&b);
        assert_eq!(s.nrows, 3);
        let d = s.to_dense();
        assert_eq!(d[(2, 0)], 3.0);
        assert_eq!(d[(2, 1)], 4.0);
        assert_eq!(d[(0, 0)], 1.0);
    }
}
