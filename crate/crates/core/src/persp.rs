//! Perspective reformulation of the resistive loss.
//!
//! With i = C†MF the loss integrand iᵀRi equals FᵀQF, Q = Mᵀ(C†)ᵀRC†M. For
//! any diagonal D ⪰ 0 with Q − D ⪰ 0 the integrand splits into Fᵀ(Q−D)F plus
//! Σₖ D_kk F_k², and at any point satisfying the disjunctive rows the second
//! part equals Σₖⱼ D_kk z²/s. Keeping the z²/s terms as perspective functions
//! tightens the continuous relaxation; they enter the node QPs through
//! epigraph variables bounded below by supporting hyperplanes (cuts), so every
//! node stays a QP.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::model::MotorModel;

#[derive(Debug, Error)]
pub enum PerspError {
    #[error("geometry matrix is rank deficient (rank {rank} < {cols})")]
    RankDeficient { rank: usize, cols: usize },
    #[error("linearization point needs s̄ > 0, got {0}")]
    BadLinearization(f64),
}

/// Loss matrix Q = Mᵀ(C†)ᵀ R C† M, ohm per turns².
pub fn compute_q(model: &MotorModel) -> Result<DMatrix<f64>, PerspError> {
    let c = &model.geometry_matrix;
    let svd = c.clone().svd(true, true);
    let rank = svd.rank(1e-9 * svd.singular_values.max());
    if rank < c.ncols() {
        return Err(PerspError::RankDeficient {
            rank,
            cols: c.ncols(),
        });
    }
    let pinv_tol = 1e-12 * svd.singular_values.max();
    let c_pinv = svd
        .pseudo_inverse(pinv_tol)
        .expect("pseudo-inverse of full-rank matrix");
    let r = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&model.resistance));
    let cpm = &c_pinv * &model.mesh_matrix;
    Ok(cpm.transpose() * r * cpm)
}

fn lambda_min(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.min()
}

fn is_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    lambda_min(m) >= -tol
}

/// Largest-trace nonnegative diagonal D with Q − D ⪰ 0.
///
/// Uniform-diagonal Q: bisection on a scalar multiplier with eigenvalue
/// checks. Otherwise projected coordinate ascent, raising one diagonal entry
/// at a time while Q − D stays PSD. The result is always re-verified; on
/// verification failure the fallback is λ_min(Q)·I clipped at zero.
pub fn choose_d(q: &DMatrix<f64>) -> Vec<f64> {
    let m = q.nrows();
    let scale = q.amax().max(1e-30);
    let psd_tol = 1e-10 * scale;
    let diag: Vec<f64> = (0..m).map(|k| q[(k, k)]).collect();
    let uniform = diag
        .iter()
        .all(|&v| (v - diag[0]).abs() <= 1e-12 * scale);

    let mut d = vec![0.0; m];
    if uniform {
        let (mut lo, mut hi) = (0.0, diag[0].max(0.0));
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let mut shifted = q.clone();
            for k in 0..m {
                shifted[(k, k)] -= mid;
            }
            if is_psd(&shifted, psd_tol) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        d = vec![lo; m];
    } else {
        for _pass in 0..3 {
            for k in 0..m {
                let mut lo = 0.0;
                let mut hi = q[(k, k)] - d[k];
                if hi <= 0.0 {
                    continue;
                }
                for _ in 0..100 {
                    let mid = 0.5 * (lo + hi);
                    let mut shifted = q.clone();
                    for j in 0..m {
                        shifted[(j, j)] -= d[j];
                    }
                    shifted[(k, k)] -= mid;
                    if is_psd(&shifted, psd_tol) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                d[k] += lo;
            }
        }
    }
    // final verification
    let mut check = q.clone();
    for k in 0..m {
        d[k] = d[k].max(0.0);
        check[(k, k)] -= d[k];
    }
    if !is_psd(&check, 10.0 * psd_tol) {
        let fallback = lambda_min(q).max(0.0);
        return vec![fallback; m];
    }
    d
}

/// Supporting hyperplane of the perspective function z²/s at (z̄, s̄):
/// w ≥ coef_z·z + coef_s·s. Tight at the linearization point, never violated
/// by any point with s ∈ {0 (z = 0, w = 0), 1 with w ≥ z²}.
pub fn perspective_cut(zbar: f64, sbar: f64) -> Result<(f64, f64), PerspError> {
    if sbar <= 0.0 {
        return Err(PerspError::BadLinearization(sbar));
    }
    let ratio = zbar / sbar;
    Ok((2.0 * ratio, -ratio * ratio))
}

/// One pooled cut: w_{kjt} ≥ coef_z·z_{kjt} + coef_s·s_{kjt}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cut {
    pub element: usize,
    pub region: usize,
    pub t: usize,
    pub coef_z: f64,
    pub coef_s: f64,
}

/// Global cut pool; cuts are appended (never deleted within a solve) and
/// deduplicated by coefficient proximity.
#[derive(Debug, Default, Clone)]
pub struct CutPool {
    cuts: Vec<Cut>,
    version: u64,
}

impl CutPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn cuts(&self) -> &[Cut] {
        &self.cuts
    }

    pub fn len(&self) -> usize {
        self.cuts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cuts.is_empty()
    }

    /// Add a cut unless an equivalent one is already pooled; returns true if added.
    pub fn add(&mut self, cut: Cut) -> bool {
        let dup = self.cuts.iter().any(|c| {
            c.element == cut.element
                && c.region == cut.region
                && c.t == cut.t
                && (c.coef_z - cut.coef_z).abs() <= 1e-9 * (1.0 + c.coef_z.abs())
                && (c.coef_s - cut.coef_s).abs() <= 1e-9 * (1.0 + c.coef_s.abs())
        });
        if dup {
            return false;
        }
        self.cuts.push(cut);
        self.version += 1;
        true
    }
}

/// Loss decomposition data for one model.
#[derive(Debug, Clone)]
pub struct Perspective {
    pub q: DMatrix<f64>,
    pub d: Vec<f64>,
}

impl Perspective {
    pub fn build(model: &MotorModel) -> Result<Self, PerspError> {
        let q = compute_q(model)?;
        let d = choose_d(&q);
        Ok(Perspective { q, d })
    }

    /// |FᵀQF − (Fᵀ(Q−D)F + Σₖ D_kk Σⱼ z²/s)| at an integer-feasible point;
    /// the reformulation-exactness audit.
    pub fn exactness_gap(&self, f: &[f64], z: &[Vec<f64>], s: &[Vec<f64>]) -> f64 {
        let m = f.len();
        let fv = nalgebra::DVector::from_column_slice(f);
        let direct = (fv.transpose() * &self.q * &fv)[(0, 0)];
        let mut split = direct - {
            let mut dd = 0.0;
            for k in 0..m {
                dd += self.d[k] * f[k] * f[k];
            }
            dd
        };
        for k in 0..m {
            for (zv, sv) in z[k].iter().zip(&s[k]) {
                if *sv > 0.5 {
                    split += self.d[k] * zv * zv / sv;
                }
            }
        }
        (direct - split).abs()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::example_motor_sampled;
    use nalgebra::DMatrix;

    #[test]
    fn example_motor_q_matches_direct_arithmetic() {
        let model = example_motor_sampled(11, 5);
        let q = compute_q(&model).unwrap();
        // C = 102·I, R = 0.1·I → Q = (0.1/102²)·MᵀM
        let coef = 0.1 / (102.0 * 102.0);
        let mtm = model.mesh_matrix.transpose() * &model.mesh_matrix;
        for i in 0..3 {
            for j in 0..3 {
                let want = coef * mtm[(i, j)];
                assert!((q[(i, j)] - want).abs() < 1e-15, "Q[{i}{j}] {} vs {want}", q[(i, j)]);
            }
        }
        // printed value from the worked constants
        assert!((q[(0, 0)] - 2.0 * 9.6117e-6).abs() < 1e-9);
    }

    #[test]
    fn identity_case_gives_r() {
        let mut model = example_motor_sampled(11, 5);
        model.geometry_matrix = DMatrix::identity(3, 3);
        model.mesh_matrix = DMatrix::identity(3, 3);
        model.resistance = vec![0.7; 3];
        let q = compute_q(&model).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.7 } else { 0.0 };
                assert!((q[(i, j)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn substitution_reproduces_loss() {
        // random full-rank C: iᵀRi with i = C†MF equals FᵀQF
        let mut model = example_motor_sampled(11, 5);
        model.geometry_matrix = DMatrix::from_row_slice(
            3,
            3,
            &[3.0, 0.5, -1.0, 0.2, 2.0, 0.3, -0.4, 1.1, 4.0],
        );
        let q = compute_q(&model).unwrap();
        let c_pinv = model
            .geometry_matrix
            .clone()
            .svd(true, true)
            .pseudo_inverse(1e-12)
            .unwrap();
        for trial in 0..5 {
            let f = nalgebra::DVector::from_fn(3, |r, _| ((trial + r + 1) as f64 * 0.917).sin() * 100.0);
            let i = &c_pinv * &model.mesh_matrix * &f;
            let loss_i: f64 = (0..3).map(|k| model.resistance[k] * i[k] * i[k]).sum();
            let loss_f = (f.transpose() * &q * &f)[(0, 0)];
            assert!((loss_i - loss_f).abs() <= 1e-10 * loss_i.abs().max(1.0));
        }
    }

    #[test]
    fn rank_deficient_c_rejected() {
        let mut model = example_motor_sampled(11, 5);
        model.geometry_matrix = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(matches!(
            compute_q(&model),
            Err(PerspError::RankDeficient { .. })
        ));
    }

    #[test]
    fn choose_d_uniform_diagonal_hits_lambda_min() {
        let model = example_motor_sampled(11, 5);
        let q = compute_q(&model).unwrap();
        // eigenvalues of MᵀM are {4, 1, 1} → λ_min(Q) = 9.6117e-6·1
        let d = choose_d(&q);
        let want = 0.1 / (102.0 * 102.0);
        for &v in &d {
            assert!((v - want).abs() <= 1e-6 * want, "d = {v}, want {want}");
        }
        let mut check = q.clone();
        for k in 0..3 {
            check[(k, k)] -= d[k];
        }
        assert!(super::is_psd(&check, 1e-12));
    }

    #[test]
    fn choose_d_diagonal_and_zero_cases() {
        let q = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&[3.0, 1.0, 2.0]));
        let d = choose_d(&q);
        for k in 0..3 {
            assert!((d[k] - q[(k, k)]).abs() < 1e-7 * q[(k, k)]);
        }
        let z = DMatrix::zeros(2, 2);
        let dz = choose_d(&z);
        assert!(dz.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cut_tangency_and_validity() {
        let (cz, cs) = perspective_cut(1.0, 1.0).unwrap();
        assert_eq!((cz, cs), (2.0, -1.0));
        // tight at (z, s) = (1, 1): w = z²/s = 1 equals 2z − s = 1
        assert_eq!(cz * 1.0 + cs * 1.0, 1.0);
        assert!(matches!(
            perspective_cut(1.0, 0.0),
            Err(PerspError::BadLinearization(_))
        ));

        // random integer-feasible points satisfy every random cut
        let mut state = 0x2545f4914f6cdd1du64;
        let mut rnd = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let mut worst = 0.0f64;
        for _ in 0..10_000 {
            let zbar = rnd() * 10.0;
            let sbar = rnd().max(1e-3);
            let (cz, cs) = perspective_cut(zbar, sbar).unwrap();
            // s = 1, w = z²
            let z = rnd() * 10.0;
            let viol1 = cz * z + cs * 1.0 - z * z;
            // s = 0, z = 0, w = 0
            let viol0 = cz * 0.0 + cs * 0.0 - 0.0;
            worst = worst.max(viol1).max(viol0);
        }
        assert!(worst <= 1e-12, "max violation {worst}");
    }

    #[test]
    fn pool_dedup_and_versioning() {
        let mut pool = CutPool::new();
        let c = Cut {
            element: 0,
            region: 1,
            t: 2,
            coef_z: 2.0,
            coef_s: -1.0,
        };
        assert!(pool.add(c));
        assert!(!pool.add(c));
        assert_eq!(pool.len(), 1);
        assert_eq!(pool.version(), 1);
        let mut c2 = c;
        c2.coef_z = 2.5;
        assert!(pool.add(c2));
        assert_eq!(pool.version(), 2);
    }
}
