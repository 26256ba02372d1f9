//! Ruiz equilibration of the stacked problem data.
//!
//! The motor problems mix ampere-turns (10³) with webers (10⁻¹) in one
//! constraint matrix, so equilibration is mandatory for the stated tolerances.
//! Iteratively scales columns of [P; A] and rows of A toward unit infinity
//! norm, then normalizes the cost.

use crate::sparse::{inf_norm, CscMatrix};

#[derive(Debug, Clone)]
pub struct Scaling {
    /// Column (variable) scaling, x = d ∘ x̂.
    pub d: Vec<f64>,
    /// Row (constraint) scaling.
    pub e: Vec<f64>,
    /// Cost scaling, scaled objective = cost · original.
    pub cost: f64,
}

impl Scaling {
    pub fn identity(n: usize, m: usize) -> Self {
        Scaling {
            d: vec![1.0; n],
            e: vec![1.0; m],
            cost: 1.0,
        }
    }
}

fn guard(v: f64) -> f64 {
    if v < 1e-12 {
        1.0
    } else {
        v.clamp(1e-6, 1e6)
    }
}

/// Equilibrate (P, q, A, l, u) in place; returns the applied scaling.
pub fn ruiz(
    p: &mut CscMatrix,
    q: &mut [f64],
    a: &mut CscMatrix,
    l: &mut [f64],
    u: &mut [f64],
    iters: usize,
) -> Scaling {
    let n = p.ncols;
    let m = a.nrows;
    let mut sc = Scaling::identity(n, m);

    for _ in 0..iters {
        // column norms over the stacked [P; A]
        let pc = p.col_inf_norms();
        let ac = a.col_inf_norms();
        let mut dx = vec![1.0; n];
        for j in 0..n {
            dx[j] = 1.0 / guard(pc[j].max(ac[j])).sqrt();
        }
        let ar = a.row_inf_norms();
        let mut de = vec![1.0; m];
        for i in 0..m {
            de[i] = 1.0 / guard(ar[i]).sqrt();
        }
        p.scale_rows(&dx);
        p.scale_cols(&dx);
        a.scale_cols(&dx);
        a.scale_rows(&de);
        for j in 0..n {
            q[j] *= dx[j];
            sc.d[j] *= dx[j];
        }
        for i in 0..m {
            if l[i].is_finite() {
                l[i] *= de[i];
            }
            if u[i].is_finite() {
                u[i] *= de[i];
            }
            sc.e[i] *= de[i];
        }
    }
    // cost normalization, once: averaging over the columns that actually
    // carry quadratic cost, so sparse objectives do not drive the scale
    let pcols = p.col_inf_norms();
    let nz: Vec<f64> = pcols.iter().copied().filter(|&v| v > 0.0).collect();
    let mean_p = if nz.is_empty() {
        0.0
    } else {
        nz.iter().sum::<f64>() / nz.len() as f64
    };
    let gamma = 1.0 / guard(mean_p.max(inf_norm(q)));
    for v in p.data.iter_mut() {
        *v *= gamma;
    }
    for v in q.iter_mut() {
        *v *= gamma;
    }
    sc.cost *= gamma;
    sc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equilibrated_norms_near_one() {
        // badly scaled data: columns spanning 1e-4 .. 1e4
        let p = CscMatrix::from_triplets(2, 2, &[(0, 0, 1e4), (1, 1, 1e-4)]);
        let a = CscMatrix::from_triplets(3, 2, &[(0, 0, 1e3), (1, 1, 2e-3), (2, 0, 5.0), (2, 1, 1.0)]);
        let mut ps = p.clone();
        let mut as_ = a.clone();
        let mut q = vec![1.0, -1e3];
        let mut l = vec![0.0, f64::NEG_INFINITY, -1.0];
        let mut u = vec![0.0, 1e4, 1.0];
        let sc = ruiz(&mut ps, &mut q, &mut as_, &mut l, &mut u, 10);
        for &v in &as_.row_inf_norms() {
            assert!(v > 0.05 && v < 20.0, "row norm {v}");
        }
        // scaling reproduces the original data
        for (i, j, v) in as_.iter() {
            let orig = a
                .iter()
                .find(|&(r, c, _)| r == i && c == j)
                .map(|(_, _, w)| w)
                .unwrap();
            assert!((v / (sc.e[i] * sc.d[j]) - orig).abs() < 1e-9 * orig.abs());
        }
    }
}
