//! Primal-dual interior-point solve on the equilibrated data.
//!
//! Mehrotra predictor-corrector for
//!
//! ```text
//!     minimize    ½ x̂ᵀP̂x̂ + q̂ᵀx̂
//!     subject to  Âeq x̂ = b̂eq          (duals y)
//!                 Âin x̂ + s = b̂in      (s ≥ 0, duals ζ ≥ 0)
//!                 l̂ ≤ x̂ ≤ û            (duals ζ_l, ζ_u ≥ 0 per finite side)
//! ```
//!
//! The box terms stay on the KKT diagonal, so the sparsity pattern is fixed
//! across iterations and across branch-and-bound nodes; only values change.
//! Fixed variables (l = u) are widened by a relative 1e-9 on each side, which
//! keeps an interior and only relaxes the problem (node bounds stay valid).

use super::ldl::LdlFactor;
use super::order::min_degree;
use crate::sparse::{inf_norm, CscMatrix};

pub(super) struct IpmData {
    pub n: usize,
    pub me: usize,
    pub mi: usize,
    pub p: CscMatrix,
    pub q: Vec<f64>,
    pub a_eq: CscMatrix,
    pub b_eq: Vec<f64>,
    pub a_in: CscMatrix,
    pub b_in: Vec<f64>,
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
}

pub(super) struct IpmOutcome {
    pub x: Vec<f64>,
    /// Duals for [eq rows, in rows, box (upper-positive)].
    pub y_eq: Vec<f64>,
    pub y_in: Vec<f64>,
    pub y_box: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

struct KktPattern {
    perm: Vec<usize>,
    pinv: Vec<usize>,
    nk: usize,
}

pub(super) struct Ipm {
    pattern: KktPattern,
    lb_eff: Vec<f64>,
    ub_eff: Vec<f64>,
    has_l: Vec<bool>,
    has_u: Vec<bool>,
    /// Exactly fixed variables are pinned by a quadratic penalty instead of a
    /// degenerate box, which keeps the central path well behaved. The penalty
    /// only relaxes the problem, so node bounds stay valid.
    pinned: Vec<Option<f64>>,
}

const DELTA: f64 = 1e-9;
const PIN_WEIGHT: f64 = 1e10;

impl Ipm {
    pub fn new(data: &IpmData) -> Ipm {
        let (n, me, mi) = (data.n, data.me, data.mi);
        let nk = n + me + mi;
        let mut edges: Vec<(usize, usize)> = Vec::new();
        for (i, j, _) in data.p.iter() {
            if i < j {
                edges.push((i, j));
            }
        }
        for (r, c, _) in data.a_eq.iter() {
            edges.push((c, n + r));
        }
        for (r, c, _) in data.a_in.iter() {
            edges.push((c, n + me + r));
        }
        let perm = min_degree(nk, edges.into_iter());
        let mut pinv = vec![0usize; nk];
        for (k, &orig) in perm.iter().enumerate() {
            pinv[orig] = k;
        }
        let mut ipm = Ipm {
            pattern: KktPattern { perm, pinv, nk },
            lb_eff: vec![],
            ub_eff: vec![],
            has_l: vec![],
            has_u: vec![],
            pinned: vec![],
        };
        ipm.set_bounds(data);
        ipm
    }

    /// Refresh the effective bounds after a box update.
    pub fn set_bounds(&mut self, data: &IpmData) {
        let n = data.n;
        let lb_eff = data.lb.clone();
        let ub_eff = data.ub.clone();
        let mut pinned = vec![None; n];
        let mut has_l = vec![false; n];
        let mut has_u = vec![false; n];
        for j in 0..n {
            let thin = lb_eff[j].is_finite()
                && ub_eff[j].is_finite()
                && ub_eff[j] - lb_eff[j] <= 1e-9 * (1.0 + lb_eff[j].abs());
            if thin {
                pinned[j] = Some(0.5 * (lb_eff[j] + ub_eff[j]));
            } else {
                has_l[j] = lb_eff[j].is_finite();
                has_u[j] = ub_eff[j].is_finite();
            }
        }
        self.has_l = has_l;
        self.has_u = has_u;
        self.pinned = pinned;
        self.lb_eff = lb_eff;
        self.ub_eff = ub_eff;
    }

    fn factor(
        &self,
        data: &IpmData,
        dbox: &[f64],
        dz: &[f64],
    ) -> Result<LdlFactor, super::ldl::LdlError> {
        let (n, me, mi) = (data.n, data.me, data.mi);
        let nk = self.pattern.nk;
        let pinv = &self.pattern.pinv;
        let mut trips: Vec<(usize, usize, f64)> =
            Vec::with_capacity(data.p.nnz() + data.a_eq.nnz() + data.a_in.nnz() + nk);
        let push = |i: usize, j: usize, v: f64, trips: &mut Vec<(usize, usize, f64)>| {
            let (pi, pj) = (pinv[i], pinv[j]);
            trips.push(if pi <= pj { (pi, pj, v) } else { (pj, pi, v) });
        };
        for (i, j, v) in data.p.iter() {
            if i <= j {
                push(i, j, v, &mut trips);
            }
        }
        for j in 0..n {
            push(j, j, dbox[j] + DELTA, &mut trips);
        }
        for (r, c, v) in data.a_eq.iter() {
            push(c, n + r, v, &mut trips);
        }
        for r in 0..me {
            push(n + r, n + r, -DELTA, &mut trips);
        }
        for (r, c, v) in data.a_in.iter() {
            push(c, n + me + r, v, &mut trips);
        }
        for r in 0..mi {
            push(n + me + r, n + me + r, -dz[r] - DELTA, &mut trips);
        }
        let kmat = CscMatrix::from_triplets(nk, nk, &trips);
        LdlFactor::factor(nk, &kmat.indptr, &kmat.indices, &kmat.data)
    }

    fn solve_kkt(&self, f: &LdlFactor, rhs: &mut [f64]) {
        let nk = self.pattern.nk;
        let mut w = vec![0.0; nk];
        for k in 0..nk {
            w[k] = rhs[self.pattern.perm[k]];
        }
        f.solve_in_place(&mut w);
        for k in 0..nk {
            rhs[self.pattern.perm[k]] = w[k];
        }
    }

    /// Run the predictor-corrector loop. `eps` is on the scaled residuals.
    pub fn solve(&self, data: &IpmData, x_start: Option<&[f64]>, eps: f64, max_iter: usize) -> IpmOutcome {
        let (n, me, mi) = (data.n, data.me, data.mi);
        let lb = &self.lb_eff;
        let ub = &self.ub_eff;

        // interior start
        let mut x = vec![0.0; n];
        for j in 0..n {
            let margin = |w: f64| (0.25 * w).min(1.0);
            if let Some(v) = self.pinned[j] {
                x[j] = v;
                continue;
            }
            x[j] = match (self.has_l[j], self.has_u[j]) {
                (true, true) => {
                    let w = ub[j] - lb[j];
                    let v = x_start.map(|xs| xs[j]).unwrap_or(0.5 * (lb[j] + ub[j]));
                    v.clamp(lb[j] + 0.25 * w.min(4.0), ub[j] - 0.25 * w.min(4.0))
                        .clamp(lb[j] + margin(w), ub[j] - margin(w))
                }
                (true, false) => x_start.map(|xs| xs[j]).unwrap_or(lb[j] + 1.0).max(lb[j] + 1.0),
                (false, true) => x_start.map(|xs| xs[j]).unwrap_or(ub[j] - 1.0).min(ub[j] - 1.0),
                (false, false) => x_start.map(|xs| xs[j]).unwrap_or(0.0),
            };
        }
        let ax0 = data.a_in.mul_vec(&x);
        let mut s: Vec<f64> = (0..mi).map(|i| (data.b_in[i] - ax0[i]).max(1.0)).collect();
        let mut z = vec![1.0f64; mi];
        let mut y = vec![0.0f64; me];
        let mut zl: Vec<f64> = (0..n).map(|j| if self.has_l[j] { 1.0 } else { 0.0 }).collect();
        let mut zu: Vec<f64> = (0..n).map(|j| if self.has_u[j] { 1.0 } else { 0.0 }).collect();

        let nb: usize = mi
            + self.has_l.iter().filter(|&&b| b).count()
            + self.has_u.iter().filter(|&&b| b).count();
        let mut iterations = 0;
        let mut converged = false;
        let mut stall = 0usize;

        for iter in 0..max_iter {
            iterations = iter + 1;
            // residuals
            let mut rd = data.p.mul_vec(&x);
            for j in 0..n {
                rd[j] += data.q[j];
            }
            data.a_eq.atxpy(&y, &mut rd);
            data.a_in.atxpy(&z, &mut rd);
            for j in 0..n {
                rd[j] += zu[j] - zl[j];
                if let Some(v) = self.pinned[j] {
                    rd[j] += PIN_WEIGHT * (x[j] - v);
                }
            }
            let mut rp = data.a_eq.mul_vec(&x);
            for r in 0..me {
                rp[r] -= data.b_eq[r];
            }
            let ax = data.a_in.mul_vec(&x);
            let mut rg = vec![0.0; mi];
            for r in 0..mi {
                rg[r] = ax[r] + s[r] - data.b_in[r];
            }
            let mut mu = 0.0;
            for r in 0..mi {
                mu += s[r] * z[r];
            }
            let mut tl = vec![0.0; n];
            let mut tu = vec![0.0; n];
            for j in 0..n {
                if self.has_l[j] {
                    tl[j] = (x[j] - lb[j]).max(1e-300);
                    mu += tl[j] * zl[j];
                }
                if self.has_u[j] {
                    tu[j] = (ub[j] - x[j]).max(1e-300);
                    mu += tu[j] * zu[j];
                }
            }
            let mu_avg = if nb > 0 { mu / nb as f64 } else { 0.0 };
            let res = inf_norm(&rd).max(inf_norm(&rp)).max(inf_norm(&rg));
            if std::env::var("RELUCT_IPM_TRACE").is_ok() {
                eprintln!("[ipm {iter}] rd {:.2e} rp {:.2e} rg {:.2e} mu {mu_avg:.2e}", inf_norm(&rd), inf_norm(&rp), inf_norm(&rg));
            }
            if !res.is_finite() || !mu_avg.is_finite() {
                break;
            }
            if res <= eps && mu_avg <= eps {
                converged = true;
                break;
            }
            if nb == 0 {
                // no barriers: one Newton step solves the equality-constrained QP
            }

            // factor with current diagonals
            let mut dbox = vec![0.0; n];
            for j in 0..n {
                if self.pinned[j].is_some() {
                    dbox[j] += PIN_WEIGHT;
                }
                if self.has_l[j] {
                    dbox[j] += (zl[j] / tl[j]).min(1e14);
                }
                if self.has_u[j] {
                    dbox[j] += (zu[j] / tu[j]).min(1e14);
                }
            }
            let dzdiag: Vec<f64> = (0..mi)
                .map(|r| (s[r] / z[r].max(1e-300)).min(1e14))
                .collect();
            let factor = match self.factor(data, &dbox, &dzdiag) {
                Ok(f) => f,
                Err(_) => break,
            };

            let solve_dir = |rcs: &[f64], rcl: &[f64], rcu: &[f64]| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
                let nk = self.pattern.nk;
                let mut rhs = vec![0.0; nk];
                for j in 0..n {
                    let mut v = -rd[j];
                    if self.has_l[j] {
                        v -= rcl[j] / tl[j];
                    }
                    if self.has_u[j] {
                        v += rcu[j] / tu[j];
                    }
                    rhs[j] = v;
                }
                for r in 0..me {
                    rhs[n + r] = -rp[r];
                }
                for r in 0..mi {
                    rhs[n + me + r] = -rg[r] + rcs[r] / z[r].max(1e-300);
                }
                let rhs0 = rhs.clone();
                self.solve_kkt(&factor, &mut rhs);
                // one refinement round against the unregularized system
                let mut resid = rhs0.clone();
                {
                    let dx = &rhs[..n];
                    let dy = &rhs[n..n + me];
                    let dzv = &rhs[n + me..];
                    let mut top = data.p.mul_vec(dx);
                    for j in 0..n {
                        top[j] += dbox[j] * dx[j];
                    }
                    data.a_eq.atxpy(dy, &mut top);
                    data.a_in.atxpy(dzv, &mut top);
                    let aeqx = data.a_eq.mul_vec(dx);
                    let ainx = data.a_in.mul_vec(dx);
                    for j in 0..n {
                        resid[j] -= top[j];
                    }
                    for r in 0..me {
                        resid[n + r] -= aeqx[r];
                    }
                    for r in 0..mi {
                        resid[n + me + r] -= ainx[r] - dzdiag[r] * dzv[r];
                    }
                }
                self.solve_kkt(&factor, &mut resid);
                for k in 0..nk {
                    rhs[k] += resid[k];
                }
                let dx = rhs[..n].to_vec();
                let dy = rhs[n..n + me].to_vec();
                let dzv = rhs[n + me..].to_vec();
                (dx, dy, dzv)
            };

            let recover = |dx: &[f64], dzv: &[f64], rcs: &[f64], rcl: &[f64], rcu: &[f64]| {
                let ain_dx = data.a_in.mul_vec(dx);
                let mut ds = vec![0.0; mi];
                for r in 0..mi {
                    ds[r] = -rg[r] - ain_dx[r];
                }
                let mut dzl = vec![0.0; n];
                let mut dzu = vec![0.0; n];
                for j in 0..n {
                    if self.has_l[j] {
                        dzl[j] = -(rcl[j] + zl[j] * dx[j]) / tl[j];
                    }
                    if self.has_u[j] {
                        dzu[j] = -(rcu[j] - zu[j] * dx[j]) / tu[j];
                    }
                }
                let _ = rcs;
                let _ = dzv;
                (ds, dzl, dzu)
            };

            let step_len = |s_: &[f64], ds: &[f64]| -> f64 {
                let mut a = 1.0f64;
                for (v, d) in s_.iter().zip(ds) {
                    if *d < 0.0 {
                        a = a.min(-v / d);
                    }
                }
                a
            };

            // predictor (affine)
            let rcs_aff: Vec<f64> = (0..mi).map(|r| s[r] * z[r]).collect();
            let rcl_aff: Vec<f64> = (0..n)
                .map(|j| if self.has_l[j] { tl[j] * zl[j] } else { 0.0 })
                .collect();
            let rcu_aff: Vec<f64> = (0..n)
                .map(|j| if self.has_u[j] { tu[j] * zu[j] } else { 0.0 })
                .collect();
            let (dx_a, _dy_a, dz_a) = solve_dir(&rcs_aff, &rcl_aff, &rcu_aff);
            if dx_a.iter().any(|v| !v.is_finite()) || dz_a.iter().any(|v| !v.is_finite()) {
                break;
            }
            let (ds_a, dzl_a, dzu_a) = recover(&dx_a, &dz_a, &rcs_aff, &rcl_aff, &rcu_aff);

            let mut alpha_aff = step_len(&s, &ds_a).min(step_len(&z, &dz_a));
            for j in 0..n {
                if self.has_l[j] {
                    if dx_a[j] < 0.0 {
                        alpha_aff = alpha_aff.min(-tl[j] / dx_a[j]);
                    }
                    if dzl_a[j] < 0.0 {
                        alpha_aff = alpha_aff.min(-zl[j] / dzl_a[j]);
                    }
                }
                if self.has_u[j] {
                    if dx_a[j] > 0.0 {
                        alpha_aff = alpha_aff.min(tu[j] / dx_a[j]);
                    }
                    if dzu_a[j] < 0.0 {
                        alpha_aff = alpha_aff.min(-zu[j] / dzu_a[j]);
                    }
                }
            }
            alpha_aff = alpha_aff.min(1.0);
            let mut mu_aff = 0.0;
            for r in 0..mi {
                mu_aff += (s[r] + alpha_aff * ds_a[r]) * (z[r] + alpha_aff * dz_a[r]);
            }
            for j in 0..n {
                if self.has_l[j] {
                    mu_aff += (tl[j] + alpha_aff * dx_a[j]) * (zl[j] + alpha_aff * dzl_a[j]);
                }
                if self.has_u[j] {
                    mu_aff += (tu[j] - alpha_aff * dx_a[j]) * (zu[j] + alpha_aff * dzu_a[j]);
                }
            }
            let mu_aff_avg = if nb > 0 { mu_aff / nb as f64 } else { 0.0 };
            let sigma = if mu_avg > 0.0 {
                (mu_aff_avg / mu_avg).powi(3).clamp(0.0, 1.0)
            } else {
                0.0
            };

            // corrector
            let smu = sigma * mu_avg;
            let rcs: Vec<f64> = (0..mi).map(|r| s[r] * z[r] + ds_a[r] * dz_a[r] - smu).collect();
            let rcl: Vec<f64> = (0..n)
                .map(|j| {
                    if self.has_l[j] {
                        tl[j] * zl[j] + dx_a[j] * dzl_a[j] - smu
                    } else {
                        0.0
                    }
                })
                .collect();
            let rcu: Vec<f64> = (0..n)
                .map(|j| {
                    if self.has_u[j] {
                        tu[j] * zu[j] - dx_a[j] * dzu_a[j] - smu
                    } else {
                        0.0
                    }
                })
                .collect();
            let (dx, dy, dzv) = solve_dir(&rcs, &rcl, &rcu);
            if dx.iter().any(|v| !v.is_finite())
                || dy.iter().any(|v| !v.is_finite())
                || dzv.iter().any(|v| !v.is_finite())
            {
                break;
            }
            let (ds, dzl, dzu) = recover(&dx, &dzv, &rcs, &rcl, &rcu);

            let tau = 0.995;
            let mut ap = step_len(&s, &ds);
            let mut ad = step_len(&z, &dzv);
            for j in 0..n {
                if self.has_l[j] {
                    if dx[j] < 0.0 {
                        ap = ap.min(-tl[j] / dx[j]);
                    }
                    if dzl[j] < 0.0 {
                        ad = ad.min(-zl[j] / dzl[j]);
                    }
                }
                if self.has_u[j] {
                    if dx[j] > 0.0 {
                        ap = ap.min(tu[j] / dx[j]);
                    }
                    if dzu[j] < 0.0 {
                        ad = ad.min(-zu[j] / dzu[j]);
                    }
                }
            }
            let ap = (tau * ap).min(1.0);
            let ad = (tau * ad).min(1.0);
            if ap < 1e-8 && ad < 1e-8 {
                stall += 1;
                if stall >= 3 {
                    break;
                }
            } else {
                stall = 0;
            }

            for j in 0..n {
                x[j] += ap * dx[j];
            }
            for r in 0..mi {
                s[r] = (s[r] + ap * ds[r]).max(1e-300);
                z[r] = (z[r] + ad * dzv[r]).max(1e-300);
            }
            for r in 0..me {
                y[r] += ad * dy[r];
            }
            for j in 0..n {
                if self.has_l[j] {
                    zl[j] = (zl[j] + ad * dzl[j]).max(1e-300);
                }
                if self.has_u[j] {
                    zu[j] = (zu[j] + ad * dzu[j]).max(1e-300);
                }
            }
        }

        let y_box: Vec<f64> = (0..n).map(|j| zu[j] - zl[j]).collect();
        IpmOutcome {
            x,
            y_eq: y,
            y_in: z,
            y_box,
            iterations,
            converged,
        }
    }
}
