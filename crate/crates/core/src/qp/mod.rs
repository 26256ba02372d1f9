//! Convex QP solver used for every branch-and-bound node relaxation.
//!
//! Problems have the form
//!
//! ```text
//!     minimize    ½ xᵀ P x + qᵀ x + c₀
//!     subject to  A_eq x = b_eq
//!                 A_in x ≤ b_in
//!                 lb ≤ x ≤ ub
//! ```
//!
//! with P positive semidefinite. The solver is an operator-splitting (ADMM)
//! method over the stacked constraint `l ≤ [A_eq; A_in; I] x ≤ u`: Ruiz
//! equilibration, a quasi-definite KKT factorization reused across iterations
//! (and across bound-only updates, which is what branching does), over-relaxed
//! iterations, adaptive penalty, and an active-set polishing step that refines
//! the candidate to near machine precision. Optimality is only ever reported
//! with certified KKT residuals; primal infeasibility is only reported with a
//! verified Farkas-type certificate.

mod ipm;
mod ldl;
mod order;
mod scaling;
mod solver;

pub use solver::Workspace;

use crate::sparse::CscMatrix;

/// Standard-form convex QP instance.
#[derive(Debug, Clone)]
pub struct QpInstance {
    pub n: usize,
    /// Full symmetric P.
    pub p: CscMatrix,
    pub q: Vec<f64>,
    pub c0: f64,
    pub a_eq: CscMatrix,
    pub b_eq: Vec<f64>,
    pub a_in: CscMatrix,
    pub b_in: Vec<f64>,
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
}

impl QpInstance {
    pub fn dims_consistent(&self) -> bool {
        self.p.nrows == self.n
            && self.p.ncols == self.n
            && self.q.len() == self.n
            && self.a_eq.ncols == self.n
            && self.a_in.ncols == self.n
            && self.b_eq.len() == self.a_eq.nrows
            && self.b_in.len() == self.a_in.nrows
            && self.lb.len() == self.n
            && self.ub.len() == self.n
    }

    /// Validate that P is positive semidefinite by attempting an LDLᵀ
    /// factorization of P + εI and checking the inertia.
    pub fn objective_is_psd(&self) -> bool {
        solver::psd_probe(&self.p)
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        let px = self.p.mul_vec(x);
        0.5 * crate::sparse::dot(x, &px) + crate::sparse::dot(&self.q, x) + self.c0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    PrimalInfeasible,
    IterationLimit,
}

/// KKT residuals in unscaled problem units.
#[derive(Debug, Clone, Copy, Default)]
pub struct KktResiduals {
    /// ‖Px + q + A_eqᵀy_eq + A_inᵀy_in + y_box‖∞
    pub stationarity: f64,
    /// max violation of equalities, inequalities and bounds
    pub primal: f64,
    /// max |y_i| · dist(row i activity, its active bound)
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }
}

#[derive(Debug, Clone)]
pub struct QpResult {
    pub status: QpStatus,
    pub x: Vec<f64>,
    /// Multipliers for equality rows.
    pub y_eq: Vec<f64>,
    /// Multipliers for inequality rows (≥ 0 at optimality).
    pub y_in: Vec<f64>,
    /// Multipliers for the box rows (sign-split lower/upper).
    pub y_box: Vec<f64>,
    pub objective: f64,
    pub dual_objective: f64,
    pub kkt: KktResiduals,
    pub iterations: usize,
    pub polished: bool,
    /// Farkas-type certificate over stacked rows [eq; in; box], present iff
    /// status is PrimalInfeasible. Normalized to ‖·‖∞ = 1; its verified
    /// violation margin is stored alongside.
    pub certificate: Option<Vec<f64>>,
    pub certificate_violation: f64,
}

/// Warm-start point. Dual sections are kept separate so a start taken from a
/// problem with fewer inequality rows (cuts are appended there) still lines
/// up; missing entries start at zero.
#[derive(Debug, Clone, Default)]
pub struct WarmStart {
    pub x: Vec<f64>,
    pub y_eq: Vec<f64>,
    pub y_in: Vec<f64>,
    pub y_box: Vec<f64>,
}

impl WarmStart {
    pub fn from_result(res: &QpResult) -> Self {
        WarmStart {
            x: res.x.clone(),
            y_eq: res.y_eq.clone(),
            y_in: res.y_in.clone(),
            y_box: res.y_box.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpConfig {
    /// Absolute termination tolerance on the equilibrated residuals; the
    /// polished solution must also meet it in unscaled units to be optimal.
    pub eps: f64,
    pub max_iter: usize,
    pub sigma: f64,
    pub alpha: f64,
    pub rho0: f64,
    pub scaling_iters: usize,
    pub check_interval: usize,
    pub adaptive_rho_interval: usize,
    pub polish: bool,
    pub polish_refine_iters: usize,
    pub eps_infeas: f64,
    /// Multiplier applied to ρ on equality rows.
    pub rho_eq_scale: f64,
    /// Try the interior-point path before falling back to operator splitting.
    pub use_ipm: bool,
    pub ipm_max_iter: usize,
}

impl Default for QpConfig {
    fn default() -> Self {
        QpConfig {
            eps: 1e-8,
            max_iter: 200_000,
            sigma: 1e-6,
            alpha: 1.6,
            rho0: 0.1,
            scaling_iters: 10,
            check_interval: 25,
            adaptive_rho_interval: 400,
            polish: true,
            polish_refine_iters: 6,
            eps_infeas: 1e-9,
            rho_eq_scale: 1e3,
            use_ipm: true,
            ipm_max_iter: 60,
        }
    }
}

/// One-shot solve at the given tolerance and iteration budget.
pub fn solve_qp(instance: &QpInstance, tolerance: f64, max_iters: usize) -> QpResult {
    let cfg = QpConfig {
        eps: tolerance,
        max_iter: max_iters,
        ..QpConfig::default()
    };
    let mut ws = Workspace::new(instance, &cfg);
    ws.solve(None)
}

/// Re-solve starting from a parent result; contract-identical to [`solve_qp`].
pub fn warm_solve(instance: &QpInstance, parent: &QpResult, tolerance: f64, max_iters: usize) -> QpResult {
    let cfg = QpConfig {
        eps: tolerance,
        max_iter: max_iters,
        ..QpConfig::default()
    };
    let mut ws = Workspace::new(instance, &cfg);
    ws.solve(Some(&WarmStart::from_result(parent)))
}
