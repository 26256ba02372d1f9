//! Sparse LDLᵀ factorization of quasi-definite matrices.
//!
//! Up-looking factorization over the elimination tree, no pivoting: the KKT
//! matrices solved here are symmetric quasi-definite, so LDLᵀ with a fixed
//! symmetric permutation exists and is stable enough once the problem data is
//! equilibrated. Input is the upper triangle in CSC form with every diagonal
//! entry present and row indices sorted within each column.

#[derive(Debug, Clone)]
pub struct LdlFactor {
    pub n: usize,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
    dinv: Vec<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum LdlError {
    #[error("matrix is not upper triangular with diagonal last in column {0}")]
    BadStructure(usize),
    #[error("zero pivot at column {0}")]
    ZeroPivot(usize),
}

/// Elimination tree and per-column nonzero counts of L.
pub fn etree(n: usize, ap: &[usize], ai: &[usize]) -> Result<(Vec<isize>, Vec<usize>), LdlError> {
    let mut parent = vec![-1isize; n];
    let mut lnz = vec![0usize; n];
    let mut work = vec![usize::MAX; n];
    for j in 0..n {
        work[j] = j;
        for p in ap[j]..ap[j + 1] {
            let mut i = ai[p];
            if i > j {
                return Err(LdlError::BadStructure(j));
            }
            while work[i] != j {
                if parent[i] == -1 {
                    parent[i] = j as isize;
                }
                lnz[i] += 1;
                work[i] = j;
                i = parent[i] as usize;
            }
        }
    }
    Ok((parent, lnz))
}

impl LdlFactor {
    /// Factor the upper-triangular CSC matrix (n, ap, ai, ax).
    pub fn factor(n: usize, ap: &[usize], ai: &[usize], ax: &[f64]) -> Result<Self, LdlError> {
        let (parent, lnz) = etree(n, ap, ai)?;
        let mut lp = vec![0usize; n + 1];
        for i in 0..n {
            lp[i + 1] = lp[i] + lnz[i];
        }
        let nnz_l = lp[n];
        let mut li = vec![0usize; nnz_l];
        let mut lx = vec![0.0f64; nnz_l];
        let mut d = vec![0.0f64; n];
        let mut dinv = vec![0.0f64; n];

        let mut y_vals = vec![0.0f64; n];
        let mut y_marker = vec![false; n];
        let mut y_idx = vec![0usize; n];
        let mut elim = vec![0usize; n];
        let mut next_in_col: Vec<usize> = lp[..n].to_vec();

        for k in 0..n {
            // column k of A must end with the diagonal entry
            let last = ap[k + 1].checked_sub(1).ok_or(LdlError::BadStructure(k))?;
            if ap[k + 1] <= ap[k] || ai[last] != k {
                return Err(LdlError::BadStructure(k));
            }
            d[k] = ax[last];
            let mut nnz_y = 0usize;
            for p in ap[k]..last {
                let i = ai[p];
                y_vals[i] = ax[p];
                if !y_marker[i] {
                    y_marker[i] = true;
                    elim[0] = i;
                    let mut nnz_e = 1usize;
                    let mut next = parent[i];
                    while next != -1 && (next as usize) < k && !y_marker[next as usize] {
                        y_marker[next as usize] = true;
                        elim[nnz_e] = next as usize;
                        nnz_e += 1;
                        next = parent[next as usize];
                    }
                    while nnz_e > 0 {
                        nnz_e -= 1;
                        y_idx[nnz_y] = elim[nnz_e];
                        nnz_y += 1;
                    }
                }
            }
            for idx in (0..nnz_y).rev() {
                let c = y_idx[idx];
                let yv = y_vals[c];
                for p in lp[c]..next_in_col[c] {
                    y_vals[li[p]] -= lx[p] * yv;
                }
                let pos = next_in_col[c];
                li[pos] = k;
                let lkc = yv * dinv[c];
                lx[pos] = lkc;
                d[k] -= yv * lkc;
                next_in_col[c] += 1;
                y_vals[c] = 0.0;
                y_marker[c] = false;
            }
            if d[k] == 0.0 {
                return Err(LdlError::ZeroPivot(k));
            }
            dinv[k] = 1.0 / d[k];
        }

        Ok(LdlFactor {
            n,
            lp,
            li,
            lx,
            d,
            dinv,
        })
    }

    /// Solve L D Lᵀ x = b in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        debug_assert_eq!(b.len(), self.n);
        for j in 0..self.n {
            let bj = b[j];
            if bj != 0.0 {
                for p in self.lp[j]..self.lp[j + 1] {
                    b[self.li[p]] -= self.lx[p] * bj;
                }
            }
        }
        for i in 0..self.n {
            b[i] *= self.dinv[i];
        }
        for j in (0..self.n).rev() {
            let mut acc = b[j];
            for p in self.lp[j]..self.lp[j + 1] {
                acc -= self.lx[p] * b[self.li[p]];
            }
            b[j] = acc;
        }
    }

    /// Signs of the diagonal of D: (positives, negatives).
    pub fn inertia(&self) -> (usize, usize) {
        let pos = self.d.iter().filter(|&&v| v > 0.0).count();
        (pos, self.n - pos)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // upper CSC of a small quasi-definite matrix
    fn upper_csc(n: usize, dense: &[f64]) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
        let mut ap = vec![0usize];
        let mut ai = Vec::new();
        let mut ax = Vec::new();
        for j in 0..n {
            for i in 0..=j {
                let v = dense[i * n + j];
                if v != 0.0 || i == j {
                    ai.push(i);
                    ax.push(v);
                }
            }
            ap.push(ai.len());
        }
        (ap, ai, ax)
    }

    #[test]
    fn factor_and_solve_quasidefinite() {
        // [[4, 1, 1], [1, 2, 0], [1, 0, -3]] — quasi-definite after sign blocks
        let n = 3;
        let dense = [4.0, 1.0, 1.0, 1.0, 2.0, 0.0, 1.0, 0.0, -3.0];
        let (ap, ai, ax) = upper_csc(n, &dense);
        let f = LdlFactor::factor(n, &ap, &ai, &ax).unwrap();
        let b = [1.0, 2.0, 3.0];
        let mut x = b;
        f.solve_in_place(&mut x);
        // residual check
        for i in 0..n {
            let mut r = -b[i];
            for j in 0..n {
                r += dense[i * n + j] * x[j];
            }
            assert!(r.abs() < 1e-12, "row {i} residual {r}");
        }
        let (pos, neg) = f.inertia();
        assert_eq!((pos, neg), (2, 1));
    }

    #[test]
    fn zero_pivot_reported() {
        let n = 2;
        let dense = [0.0, 0.0, 0.0, 1.0];
        let (ap, ai, ax) = upper_csc(n, &dense);
        assert!(matches!(
            LdlFactor::factor(n, &ap, &ai, &ax),
            Err(LdlError::ZeroPivot(0))
        ));
    }
}
