//! Operator-splitting solve loop, KKT handling, polish, and certificates.

use super::ipm::{Ipm, IpmData};
use super::ldl::LdlFactor;
use super::order::min_degree;
use super::scaling::{ruiz, Scaling};
use super::{KktResiduals, QpConfig, QpInstance, QpResult, QpStatus, WarmStart};
use crate::sparse::{dot, inf_norm, CscMatrix};

/// Solver state bound to one problem structure. Box bounds may be updated
/// between solves without refactoring the KKT matrix, which is what makes
/// branch-and-bound nodes cheap.
pub struct Workspace {
    cfg: QpConfig,
    n: usize,
    m: usize,
    me: usize,
    mi: usize,
    // scaled data
    p: CscMatrix,
    q: Vec<f64>,
    a: CscMatrix,
    l: Vec<f64>,
    u: Vec<f64>,
    sc: Scaling,
    // original data
    q0: Vec<f64>,
    c0: f64,
    p0: CscMatrix,
    a0: CscMatrix,
    l0: Vec<f64>,
    u0: Vec<f64>,
    eq_row: Vec<bool>,
    // penalty and factorization
    sigma: f64,
    rho_bar: f64,
    rho: Vec<f64>,
    rho_inv: Vec<f64>,
    perm: Vec<usize>,
    factor: LdlFactor,
    // iterates
    x: Vec<f64>,
    z: Vec<f64>,
    y: Vec<f64>,
    rho_dir: i8,
    rho_flips: u8,
    ipm_data: IpmData,
    ipm: Ipm,
}

pub(super) fn psd_probe(p: &CscMatrix) -> bool {
    let n = p.ncols;
    let scale = p.data.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1.0);
    let eps = 1e-10 * scale;
    let mut trips: Vec<(usize, usize, f64)> = p.iter().filter(|&(i, j, _)| i <= j).collect();
    for j in 0..n {
        trips.push((j, j, eps));
    }
    let upper = CscMatrix::from_triplets(n, n, &trips);
    match LdlFactor::factor(n, &upper.indptr, &upper.indices, &upper.data) {
        Ok(f) => f.inertia().1 == 0,
        Err(_) => false,
    }
}

fn stack_instance(inst: &QpInstance) -> (CscMatrix, Vec<f64>, Vec<f64>) {
    let a = inst.a_eq.vstack(&inst.a_in).vstack(&CscMatrix::identity(inst.n));
    let mut l = inst.b_eq.clone();
    let mut u = inst.b_eq.clone();
    l.extend(std::iter::repeat(f64::NEG_INFINITY).take(inst.a_in.nrows));
    u.extend_from_slice(&inst.b_in);
    l.extend_from_slice(&inst.lb);
    u.extend_from_slice(&inst.ub);
    (a, l, u)
}

impl Workspace {
    pub fn new(inst: &QpInstance, cfg: &QpConfig) -> Self {
        assert!(inst.dims_consistent(), "inconsistent QP dimensions");
        let n = inst.n;
        let (a0, l0, u0) = stack_instance(inst);
        let m = a0.nrows;
        let mut p = inst.p.clone();
        let mut q = inst.q.clone();
        let mut a = a0.clone();
        let mut l = l0.clone();
        let mut u = u0.clone();
        let sc = if cfg.scaling_iters > 0 {
            ruiz(&mut p, &mut q, &mut a, &mut l, &mut u, cfg.scaling_iters)
        } else {
            Scaling::identity(n, m)
        };
        let eq_row: Vec<bool> = (0..m)
            .map(|i| l0[i].is_finite() && u0[i].is_finite() && l0[i] == u0[i])
            .collect();
        let rho_bar = cfg.rho0;
        let (rho, rho_inv) = build_rho(rho_bar, cfg.rho_eq_scale, &eq_row);

        // KKT ordering from the pattern, once per structure
        let mut edges: Vec<(usize, usize)> = Vec::with_capacity(p.nnz() + a.nnz());
        for (i, j, _) in p.iter() {
            if i < j {
                edges.push((i, j));
            }
        }
        for (r, c, _) in a.iter() {
            edges.push((c, n + r));
        }
        let perm = min_degree(n + m, edges.into_iter());

        let factor = factor_kkt(&p, &a, cfg.sigma, &rho_inv, &perm)
            .expect("KKT factorization of a quasi-definite matrix");

        // split scaled blocks for the interior-point path
        let me = inst.a_eq.nrows;
        let mi = inst.a_in.nrows;
        let mut eq_trips = Vec::new();
        let mut in_trips = Vec::new();
        for (r, c, v) in a.iter() {
            if r < me {
                eq_trips.push((r, c, v));
            } else if r < me + mi {
                in_trips.push((r - me, c, v));
            }
        }
        let ipm_data = IpmData {
            n,
            me,
            mi,
            p: p.clone(),
            q: q.clone(),
            a_eq: CscMatrix::from_triplets(me, n, &eq_trips),
            b_eq: l[..me].to_vec(),
            a_in: CscMatrix::from_triplets(mi, n, &in_trips),
            b_in: u[me..me + mi].to_vec(),
            lb: (0..n)
                .map(|j| if inst.lb[j].is_finite() { inst.lb[j] / sc.d[j] } else { inst.lb[j] })
                .collect(),
            ub: (0..n)
                .map(|j| if inst.ub[j].is_finite() { inst.ub[j] / sc.d[j] } else { inst.ub[j] })
                .collect(),
        };
        let ipm = Ipm::new(&ipm_data);

        Workspace {
            cfg: cfg.clone(),
            n,
            m,
            me: inst.a_eq.nrows,
            mi: inst.a_in.nrows,
            p,
            q,
            a,
            l,
            u,
            sc,
            q0: inst.q.clone(),
            c0: inst.c0,
            p0: inst.p.clone(),
            a0,
            l0,
            u0,
            eq_row,
            sigma: cfg.sigma,
            rho_bar,
            rho,
            rho_inv,
            perm,
            factor,
            x: vec![0.0; n],
            z: vec![0.0; m],
            y: vec![0.0; m],
            rho_dir: 0,
            rho_flips: 0,
            ipm_data,
            ipm,
        }
    }

    /// Replace the box-bound section (variable bounds). The KKT factorization
    /// is untouched: bounds only enter through the projection step.
    pub fn set_box_bounds(&mut self, lb: &[f64], ub: &[f64]) {
        assert_eq!(lb.len(), self.n);
        assert_eq!(ub.len(), self.n);
        let off = self.me + self.mi;
        for j in 0..self.n {
            self.l0[off + j] = lb[j];
            self.u0[off + j] = ub[j];
            let e = self.sc.e[off + j];
            self.l[off + j] = if lb[j].is_finite() { lb[j] * e } else { lb[j] };
            self.u[off + j] = if ub[j].is_finite() { ub[j] * e } else { ub[j] };
            self.eq_row[off + j] = lb[j].is_finite() && ub[j].is_finite() && lb[j] == ub[j];
            self.ipm_data.lb[j] = if lb[j].is_finite() { lb[j] / self.sc.d[j] } else { lb[j] };
            self.ipm_data.ub[j] = if ub[j].is_finite() { ub[j] / self.sc.d[j] } else { ub[j] };
        }
        self.ipm.set_bounds(&self.ipm_data);
    }

    /// Replace the linear objective term (same structure, new q).
    pub fn set_linear(&mut self, q: &[f64], c0: f64) {
        assert_eq!(q.len(), self.n);
        self.q0 = q.to_vec();
        self.c0 = c0;
        for j in 0..self.n {
            self.q[j] = q[j] * self.sc.d[j] * self.sc.cost;
        }
    }

    pub fn solve(&mut self, warm: Option<&WarmStart>) -> QpResult {
        let (n, m) = (self.n, self.m);
        // a warm start taken from a nearly-identical parent often remains
        // optimal: one active-set refinement from it settles immediately
        if let Some(w) = warm {
            if self.cfg.polish {
                self.load_warm(w);
                let trial = self.finish(1, true);
                if trial.status == QpStatus::Optimal {
                    return trial;
                }
            }
        }
        if self.cfg.use_ipm {
            let x_start: Option<Vec<f64>> = warm.map(|w| {
                (0..n)
                    .map(|j| if j < w.x.len() { w.x[j] / self.sc.d[j] } else { 0.0 })
                    .collect()
            });
            let eps_ipm = (self.cfg.eps * 1e-1).max(1e-12);
            let out = self.ipm.solve(&self.ipm_data, x_start.as_deref(), eps_ipm, self.cfg.ipm_max_iter);
            // adopt the interior-point iterates as the current point
            self.x.copy_from_slice(&out.x);
            for r in 0..self.me {
                self.y[r] = out.y_eq[r];
            }
            for r in 0..self.mi {
                self.y[self.me + r] = out.y_in[r];
            }
            for j in 0..n {
                let e = self.sc.e[self.me + self.mi + j];
                self.y[self.me + self.mi + j] = out.y_box[j] / (self.sc.d[j] * e);
            }
            let ax = self.a.mul_vec(&self.x);
            for i in 0..m {
                self.z[i] = clamp(ax[i], self.l[i], self.u[i]);
            }
            if out.converged {
                let trial = self.finish(out.iterations, true);
                if trial.status == QpStatus::Optimal {
                    return trial;
                }
            }
            // fall through to operator splitting (which also runs the
            // infeasibility detection) from the interior-point iterate
            let res = self.admm_solve(None, out.iterations);
            return res;
        }
        self.admm_solve(warm, 0)
    }

    fn load_warm(&mut self, w: &WarmStart) {
        let (n, m) = (self.n, self.m);
        for j in 0..n {
            self.x[j] = if j < w.x.len() { w.x[j] / self.sc.d[j] } else { 0.0 };
        }
        let mut y_un = vec![0.0; m];
        for (i, &v) in w.y_eq.iter().take(self.me).enumerate() {
            y_un[i] = v;
        }
        for (i, &v) in w.y_in.iter().take(self.mi).enumerate() {
            y_un[self.me + i] = v;
        }
        for (i, &v) in w.y_box.iter().take(n).enumerate() {
            y_un[self.me + self.mi + i] = v;
        }
        for i in 0..m {
            self.y[i] = y_un[i] * self.sc.cost / self.sc.e[i];
        }
        let ax = self.a.mul_vec(&self.x);
        for i in 0..m {
            self.z[i] = clamp(ax[i], self.l[i], self.u[i]);
        }
    }

    fn admm_solve(&mut self, warm: Option<&WarmStart>, iter_offset: usize) -> QpResult {
        let (n, m) = (self.n, self.m);
        // initial point
        if let Some(w) = warm {
            self.load_warm(w);
        } else if iter_offset == 0 {
            self.x.iter_mut().for_each(|v| *v = 0.0);
            self.y.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..m {
                self.z[i] = clamp(0.0, self.l[i], self.u[i]);
            }
        }

        let mut rhs = vec![0.0; n + m];
        let mut y_prev = vec![0.0; m];
        let mut ztil = vec![0.0; m];
        let mut eps_target = self.cfg.eps;
        let mut converged = false;
        let mut iterations = iter_offset;
        let mut next_polish = 100usize;
        let mut polish_backoff = 250usize;
        self.rho_dir = 0;
        self.rho_flips = 0;

        for k in 0..self.cfg.max_iter {
            iterations = iter_offset + k + 1;
            y_prev.copy_from_slice(&self.y);

            for j in 0..n {
                rhs[j] = self.sigma * self.x[j] - self.q[j];
            }
            for i in 0..m {
                rhs[n + i] = self.z[i] - self.rho_inv[i] * self.y[i];
            }
            self.solve_kkt(&mut rhs);

            let alpha = self.cfg.alpha;
            for i in 0..m {
                ztil[i] = self.z[i] + self.rho_inv[i] * (rhs[n + i] - self.y[i]);
            }
            for j in 0..n {
                self.x[j] = alpha * rhs[j] + (1.0 - alpha) * self.x[j];
            }
            for i in 0..m {
                let zc = alpha * ztil[i] + (1.0 - alpha) * self.z[i] + self.rho_inv[i] * self.y[i];
                let zn = clamp(zc, self.l[i], self.u[i]);
                self.y[i] = self.rho[i] * (zc - zn);
                self.z[i] = zn;
            }

            if (k + 1) % self.cfg.check_interval == 0 {
                let (rp, rd) = self.scaled_residuals();
                let converged_scaled = rp <= eps_target && rd <= eps_target;
                // polishing solves the guessed active set directly; accept it
                // only when the certified residuals pass in both scalings
                if self.cfg.polish && (converged_scaled || k + 1 >= next_polish) {
                    let trial = self.finish(k + 1, true);
                    if trial.status == QpStatus::Optimal {
                        return trial;
                    }
                    if converged_scaled {
                        eps_target *= 0.1;
                        if eps_target < 1e-14 {
                            converged = true;
                            break;
                        }
                    }
                    next_polish = k + 1 + polish_backoff;
                    polish_backoff = (polish_backoff * 2).min(2000);
                } else if converged_scaled {
                    let trial = self.finish(k + 1, false);
                    if trial.status == QpStatus::Optimal {
                        return trial;
                    }
                    eps_target *= 0.1;
                    if eps_target < 1e-14 {
                        converged = true;
                        break;
                    }
                }
                if let Some(cert) = self.detect_primal_infeasible(&y_prev) {
                    return self.infeasible_result(iterations, cert);
                }
                if (k + 1) % self.cfg.adaptive_rho_interval == 0 {
                    self.adapt_rho(rp, rd);
                }
            }
        }
        let _ = converged;
        self.finish(iterations, true)
    }

    fn solve_kkt(&self, rhs: &mut [f64]) {
        let nn = self.n + self.m;
        let mut w = vec![0.0; nn];
        for k in 0..nn {
            w[k] = rhs[self.perm[k]];
        }
        self.factor.solve_in_place(&mut w);
        for k in 0..nn {
            rhs[self.perm[k]] = w[k];
        }
    }

    fn scaled_residuals(&self) -> (f64, f64) {
        let ax = self.a.mul_vec(&self.x);
        let mut rp = 0.0f64;
        for i in 0..self.m {
            rp = rp.max((ax[i] - self.z[i]).abs());
        }
        let mut rd = self.p.mul_vec(&self.x);
        for j in 0..self.n {
            rd[j] += self.q[j];
        }
        self.a.atxpy(&self.y, &mut rd);
        (rp, inf_norm(&rd))
    }

    fn adapt_rho(&mut self, rp: f64, rd: f64) {
        let ax = self.a.mul_vec(&self.x);
        let px = self.p.mul_vec(&self.x);
        let aty = self.a.mul_vec_t(&self.y);
        let p_norm = inf_norm(&ax).max(inf_norm(&self.z)).max(1e-10);
        let d_norm = inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(&self.q)).max(1e-10);
        if self.rho_flips >= 2 {
            return; // oscillating: freeze the penalty for this solve
        }
        let ratio = ((rp / p_norm) / (rd / d_norm).max(1e-16)).sqrt().clamp(0.1, 10.0);
        let new_bar = (self.rho_bar * ratio).clamp(1e-6, 1e6);
        if new_bar > 5.0 * self.rho_bar || new_bar < self.rho_bar / 5.0 {
            let dir: i8 = if new_bar > self.rho_bar { 1 } else { -1 };
            if self.rho_dir != 0 && dir != self.rho_dir {
                self.rho_flips += 1;
            }
            self.rho_dir = dir;
            let old_bar = self.rho_bar;
            self.rho_bar = new_bar;
            let (rho, rho_inv) = build_rho(new_bar, self.cfg.rho_eq_scale, &self.eq_row);
            self.rho = rho;
            self.rho_inv = rho_inv;
            match factor_kkt(&self.p, &self.a, self.sigma, &self.rho_inv, &self.perm) {
                Ok(f) => self.factor = f,
                Err(e) => {
                    // roll the penalty back so data and factor stay consistent
                    self.rho_bar = old_bar;
                    let (rho, rho_inv) = build_rho(old_bar, self.cfg.rho_eq_scale, &self.eq_row);
                    self.rho = rho;
                    self.rho_inv = rho_inv;
                }
            }
        }
    }

    // ---------------------------------------------------------------------
    // results
    // ---------------------------------------------------------------------

    fn unscaled_point(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let x: Vec<f64> = (0..self.n).map(|j| self.x[j] * self.sc.d[j]).collect();
        let y: Vec<f64> = (0..self.m)
            .map(|i| self.y[i] * self.sc.e[i] / self.sc.cost)
            .collect();
        let z: Vec<f64> = (0..self.m)
            .map(|i| {
                let e = self.sc.e[i];
                if self.z[i].is_finite() {
                    self.z[i] / e
                } else {
                    self.z[i]
                }
            })
            .collect();
        (x, y, z)
    }

    fn residuals_unscaled(&self, x: &[f64], y: &[f64]) -> KktResiduals {
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return KktResiduals {
                stationarity: f64::INFINITY,
                primal: f64::INFINITY,
                complementarity: f64::INFINITY,
            };
        }
        let ax = self.a0.mul_vec(x);
        let mut primal = 0.0f64;
        let mut comp = 0.0f64;
        for i in 0..self.m {
            let lo = self.l0[i];
            let hi = self.u0[i];
            primal = primal.max(lo - ax[i]).max(ax[i] - hi);
            let dist = if y[i] > 0.0 {
                if hi.is_finite() {
                    (ax[i] - hi).abs()
                } else {
                    1.0
                }
            } else if y[i] < 0.0 {
                if lo.is_finite() {
                    (ax[i] - lo).abs()
                } else {
                    1.0
                }
            } else {
                0.0
            };
            comp = comp.max(y[i].abs() * dist);
        }
        let mut stat = self.p0.mul_vec(x);
        for j in 0..self.n {
            stat[j] += self.q0[j];
        }
        self.a0.atxpy(y, &mut stat);
        KktResiduals {
            stationarity: inf_norm(&stat),
            primal: primal.max(0.0),
            complementarity: comp,
        }
    }

    fn dual_objective(&self, x: &[f64], y: &[f64]) -> f64 {
        let px = self.p0.mul_vec(x);
        let mut val = -0.5 * dot(x, &px) + self.c0;
        for i in 0..self.m {
            let yp = y[i].max(0.0);
            let ym = y[i].min(0.0);
            if yp > 0.0 {
                if self.u0[i].is_finite() {
                    val -= self.u0[i] * yp;
                } else if yp > 1e-10 {
                    return f64::NEG_INFINITY;
                }
            }
            if ym < 0.0 {
                if self.l0[i].is_finite() {
                    val -= self.l0[i] * ym;
                } else if ym < -1e-10 {
                    return f64::NEG_INFINITY;
                }
            }
        }
        val
    }

    fn finish(&mut self, iterations: usize, try_polish: bool) -> QpResult {
        let (mut x, mut y, _z) = self.unscaled_point();
        let mut kkt = self.residuals_unscaled(&x, &y);
        let mut polished = false;
        if try_polish && self.cfg.polish {
            if let Some((xp, yp)) = self.active_set_refine() {
                let kp = self.residuals_unscaled(&xp, &yp);
                if kp.max() < kkt.max() {
                    x = xp;
                    y = yp;
                    kkt = kp;
                    polished = true;
                }
            }
        }
        // scaled residuals must also pass for optimal status
        let (rp_sc, rd_sc) = if polished {
            // recompute from the polished point in scaled space
            let xs: Vec<f64> = (0..self.n).map(|j| x[j] / self.sc.d[j]).collect();
            let ys: Vec<f64> = (0..self.m)
                .map(|i| y[i] * self.sc.cost / self.sc.e[i])
                .collect();
            let ax = self.a.mul_vec(&xs);
            let mut rp = 0.0f64;
            for i in 0..self.m {
                rp = rp.max((self.l[i] - ax[i]).max(ax[i] - self.u[i]).max(0.0));
            }
            let mut rd = self.p.mul_vec(&xs);
            for j in 0..self.n {
                rd[j] += self.q[j];
            }
            self.a.atxpy(&ys, &mut rd);
            (rp, inf_norm(&rd))
        } else {
            self.scaled_residuals()
        };
        let status = if kkt.max() <= self.cfg.eps && rp_sc <= self.cfg.eps && rd_sc <= self.cfg.eps {
            QpStatus::Optimal
        } else {
            QpStatus::IterationLimit
        };
        let objective = {
            let px = self.p0.mul_vec(&x);
            0.5 * dot(&x, &px) + dot(&self.q0, &x) + self.c0
        };
        let dual_objective = self.dual_objective(&x, &y);
        let (me, mi) = (self.me, self.mi);
        QpResult {
            status,
            y_eq: y[..me].to_vec(),
            y_in: y[me..me + mi].to_vec(),
            y_box: y[me + mi..].to_vec(),
            x,
            objective,
            dual_objective,
            kkt,
            iterations,
            polished,
            certificate: None,
            certificate_violation: 0.0,
        }
    }

    fn infeasible_result(&self, iterations: usize, cert: (Vec<f64>, f64)) -> QpResult {
        let (x, y, _z) = self.unscaled_point();
        let kkt = self.residuals_unscaled(&x, &y);
        let (me, mi) = (self.me, self.mi);
        QpResult {
            status: QpStatus::PrimalInfeasible,
            y_eq: y[..me].to_vec(),
            y_in: y[me..me + mi].to_vec(),
            y_box: y[me + mi..].to_vec(),
            x,
            objective: f64::INFINITY,
            dual_objective: f64::INFINITY,
            kkt,
            iterations,
            polished: false,
            certificate: Some(cert.0),
            certificate_violation: cert.1,
        }
    }

    /// OSQP-style primal infeasibility test on the dual increment, followed by
    /// an exact verification of the Farkas certificate in unscaled units.
    fn detect_primal_infeasible(&self, y_prev: &[f64]) -> Option<(Vec<f64>, f64)> {
        let mut dy = vec![0.0; self.m];
        for i in 0..self.m {
            dy[i] = (self.y[i] - y_prev[i]) * self.sc.e[i] / self.sc.cost;
        }
        let norm = inf_norm(&dy);
        if norm <= 1e-12 {
            return None;
        }
        for v in dy.iter_mut() {
            *v /= norm;
        }
        // project onto the admissible sign pattern for infinite bounds
        for i in 0..self.m {
            if self.u0[i] == f64::INFINITY {
                dy[i] = dy[i].min(0.0);
            }
            if self.l0[i] == f64::NEG_INFINITY {
                dy[i] = dy[i].max(0.0);
            }
        }
        if inf_norm(&dy) <= 1e-10 {
            return None;
        }
        self.verify_certificate(&dy)
    }

    /// Check ‖A₀ᵀ y‖∞ ≈ 0 and the support value uᵀy₊ + lᵀy₋ < 0; returns the
    /// normalized certificate with its violation margin when valid.
    pub fn verify_certificate(&self, cert: &[f64]) -> Option<(Vec<f64>, f64)> {
        let norm = inf_norm(cert);
        if norm <= 0.0 {
            return None;
        }
        let yc: Vec<f64> = cert.iter().map(|v| v / norm).collect();
        let aty = self.a0.mul_vec_t(&yc);
        let a_scale = self
            .a0
            .data
            .iter()
            .fold(0.0f64, |a, &b| a.max(b.abs()))
            .max(1.0);
        if inf_norm(&aty) > 1e-8 * a_scale {
            return None;
        }
        let mut support = 0.0;
        for i in 0..self.m {
            let yp = yc[i].max(0.0);
            let ym = yc[i].min(0.0);
            if yp > 0.0 {
                if !self.u0[i].is_finite() {
                    return None;
                }
                support += self.u0[i] * yp;
            }
            if ym < 0.0 {
                if !self.l0[i].is_finite() {
                    return None;
                }
                support += self.l0[i] * ym;
            }
        }
        let bound_scale = 1.0f64;
        if support <= -self.cfg.eps_infeas * bound_scale {
            Some((yc, -support))
        } else {
            None
        }
    }

    // ---------------------------------------------------------------------
    // polish
    // ---------------------------------------------------------------------

    /// Iterated primal-dual active-set refinement.
    ///
    /// Classify each row with the Moreau–Yosida test y + c·(Ax − bound),
    /// solve the equality-reduced KKT system on the guessed actives, and
    /// repeat from the new point until the active set stabilizes. Converges
    /// to the exact optimum once the classification is right; the caller
    /// verifies residuals before adopting the result.
    fn active_set_refine(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let mut x = self.x.clone();
        let mut y = self.y.clone();
        let mut act_prev: Vec<i8> = Vec::new();
        let mut best: Option<(Vec<f64>, Vec<f64>, f64)> = None;
        for _pass in 0..25 {
            let ax = self.a.mul_vec(&x);
            let mut act = vec![0i8; self.m];
            for i in 0..self.m {
                if self.eq_row[i] {
                    act[i] = -1;
                } else if self.l[i].is_finite() && y[i] + ax[i] - self.l[i] < 0.0 {
                    act[i] = -1;
                } else if self.u[i].is_finite() && y[i] + ax[i] - self.u[i] > 0.0 {
                    act[i] = 1;
                }
            }
            if act == act_prev {
                break;
            }
            act_prev = act.clone();
            let (xp, yp) = self.solve_reduced(&act)?;
            x = xp;
            y = yp;
            // track the best scaled KKT residual over passes
            let mut rp = 0.0f64;
            let ax = self.a.mul_vec(&x);
            for i in 0..self.m {
                rp = rp.max((self.l[i] - ax[i]).max(ax[i] - self.u[i]).max(0.0));
            }
            let mut rd = self.p.mul_vec(&x);
            for j in 0..self.n {
                rd[j] += self.q[j];
            }
            self.a.atxpy(&y, &mut rd);
            let score = rp.max(inf_norm(&rd));
            if best.as_ref().map_or(true, |(_, _, b)| score < *b) {
                best = Some((x.clone(), y.clone(), score));
            }
            if score <= 1e-14 {
                break;
            }
        }
        let (xs, ys, _) = best?;
        let x_un: Vec<f64> = (0..self.n).map(|j| xs[j] * self.sc.d[j]).collect();
        let y_un: Vec<f64> = (0..self.m)
            .map(|i| ys[i] * self.sc.e[i] / self.sc.cost)
            .collect();
        Some((x_un, y_un))
    }

    /// Solve the equality-reduced KKT system for an active-set guess
    /// (−1 lower/equality, +1 upper, 0 inactive), in scaled space, with static
    /// regularization and iterative refinement against the unregularized
    /// system. Returns scaled (x, y-full).
    fn solve_reduced(&self, act: &[i8]) -> Option<(Vec<f64>, Vec<f64>)> {
        let n = self.n;
        let mut rows = Vec::new();
        let mut bred = Vec::new();
        for i in 0..self.m {
            match act[i] {
                -1 => {
                    rows.push(i);
                    bred.push(self.l[i]);
                }
                1 => {
                    rows.push(i);
                    bred.push(self.u[i]);
                }
                _ => {}
            }
        }
        let nred = rows.len();
        let mut row_pos = vec![usize::MAX; self.m];
        for (r, &i) in rows.iter().enumerate() {
            row_pos[i] = r;
        }

        let delta = 1e-8;
        let nn = n + nred;
        let mut trips: Vec<(usize, usize, f64)> = Vec::new();
        for (i, j, v) in self.p.iter() {
            if i <= j {
                trips.push((i, j, v));
            }
        }
        for j in 0..n {
            trips.push((j, j, delta));
        }
        for (r, c, v) in self.a.iter() {
            let rp = row_pos[r];
            if rp != usize::MAX {
                trips.push((c, n + rp, v));
            }
        }
        for r in 0..nred {
            trips.push((n + r, n + r, -delta));
        }
        let kmat = CscMatrix::from_triplets(nn, nn, &trips);
        let perm = min_degree(nn, kmat.iter().filter(|&(i, j, _)| i < j).map(|(i, j, _)| (i, j)));
        let mut pk = vec![0usize; nn];
        for (kpos, &orig) in perm.iter().enumerate() {
            pk[orig] = kpos;
        }
        let mut ptrips: Vec<(usize, usize, f64)> = Vec::with_capacity(trips.len());
        for &(i, j, v) in &trips {
            let (pi, pj) = (pk[i], pk[j]);
            ptrips.push(if pi <= pj { (pi, pj, v) } else { (pj, pi, v) });
        }
        let kp = CscMatrix::from_triplets(nn, nn, &ptrips);
        let f = LdlFactor::factor(nn, &kp.indptr, &kp.indices, &kp.data).ok()?;

        let mut rhs = vec![0.0; nn];
        for j in 0..n {
            rhs[j] = -self.q[j];
        }
        for r in 0..nred {
            rhs[n + r] = bred[r];
        }
        let solve_perm = |f: &LdlFactor, b: &mut Vec<f64>| {
            let mut w = vec![0.0; nn];
            for k in 0..nn {
                w[k] = b[perm[k]];
            }
            f.solve_in_place(&mut w);
            for k in 0..nn {
                b[perm[k]] = w[k];
            }
        };
        let mut w = rhs.clone();
        solve_perm(&f, &mut w);
        // proximal iterative refinement against the unregularized reduced
        // KKT; rows made dependent by fixed variables keep it singular but
        // consistent, where this iteration still converges
        let mut best: Option<(Vec<f64>, f64)> = None;
        for _ in 0..24 {
            let mut r = rhs.clone();
            let (wx, wy) = w.split_at(n);
            let mut top = self.p.mul_vec(wx);
            let mut yfull = vec![0.0; self.m];
            for (r_i, &i) in rows.iter().enumerate() {
                yfull[i] = wy[r_i];
            }
            self.a.atxpy(&yfull, &mut top);
            let ax = self.a.mul_vec(wx);
            for j in 0..n {
                r[j] -= top[j];
            }
            for (r_i, &i) in rows.iter().enumerate() {
                r[n + r_i] -= ax[i];
            }
            let res = inf_norm(&r);
            if best.as_ref().map_or(true, |(_, b)| res < *b) {
                best = Some((w.clone(), res));
            }
            if res <= 1e-13 * (1.0 + inf_norm(&rhs)) {
                break;
            }
            let mut dw = r;
            solve_perm(&f, &mut dw);
            for k in 0..nn {
                w[k] += dw[k];
            }
        }
        if let Some((wb, _)) = best {
            w = wb;
        }

        let x = w[..n].to_vec();
        let mut y = vec![0.0; self.m];
        for (r_i, &i) in rows.iter().enumerate() {
            y[i] = w[n + r_i];
        }
        Some((x, y))
    }
}

fn clamp(v: f64, lo: f64, hi: f64) -> f64 {
    v.max(lo).min(hi)
}

fn build_rho(rho_bar: f64, eq_scale: f64, eq_row: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let rho: Vec<f64> = eq_row
        .iter()
        .map(|&eq| if eq { (rho_bar * eq_scale).clamp(1e-6, 1e6) } else { rho_bar })
        .collect();
    let rho_inv = rho.iter().map(|r| 1.0 / r).collect();
    (rho, rho_inv)
}

fn factor_kkt(
    p: &CscMatrix,
    a: &CscMatrix,
    sigma: f64,
    rho_inv: &[f64],
    perm: &[usize],
) -> Result<LdlFactor, super::ldl::LdlError> {
    let n = p.ncols;
    let m = a.nrows;
    let nn = n + m;
    let mut pk = vec![0usize; nn];
    for (kpos, &orig) in perm.iter().enumerate() {
        pk[orig] = kpos;
    }
    let mut trips: Vec<(usize, usize, f64)> = Vec::with_capacity(p.nnz() + a.nnz() + nn);
    let push = |i: usize, j: usize, v: f64, trips: &mut Vec<(usize, usize, f64)>| {
        let (pi, pj) = (pk[i], pk[j]);
        trips.push(if pi <= pj { (pi, pj, v) } else { (pj, pi, v) });
    };
    for (i, j, v) in p.iter() {
        if i <= j {
            push(i, j, v, &mut trips);
        }
    }
    for j in 0..n {
        push(j, j, sigma, &mut trips);
    }
    for (r, c, v) in a.iter() {
        push(c, n + r, v, &mut trips);
    }
    for (r, &ri) in rho_inv.iter().enumerate() {
        push(n + r, n + r, -ri, &mut trips);
    }
    let kmat = CscMatrix::from_triplets(nn, nn, &trips);
    LdlFactor::factor(nn, &kmat.indptr, &kmat.indices, &kmat.data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qp::{solve_qp, warm_solve, QpInstance, QpStatus};

    fn empty(n: usize) -> CscMatrix {
        CscMatrix::zeros(0, n)
    }

    /// minimize x² subject to x ≥ 3 → x = 3, objective 9.
    #[test]
    fn textbook_kkt() {
        let inst = QpInstance {
            n: 1,
            p: CscMatrix::from_triplets(1, 1, &[(0, 0, 2.0)]),
            q: vec![0.0],
            c0: 0.0,
            a_eq: empty(1),
            b_eq: vec![],
            a_in: empty(1),
            b_in: vec![],
            lb: vec![3.0],
            ub: vec![f64::INFINITY],
        };
        let res = solve_qp(&inst, 1e-9, 20_000);
        assert_eq!(res.status, QpStatus::Optimal);
        assert!((res.x[0] - 3.0).abs() < 1e-8);
        assert!((res.objective - 9.0).abs() < 1e-7);
        assert!(res.kkt.max() <= 1e-9);
        // duality
        assert!(res.objective - res.dual_objective <= 1e-6 * (1.0 + res.objective.abs()));
    }

    /// Equality-constrained QP against a dense KKT factorization oracle.
    #[test]
    fn equality_only_matches_dense_kkt() {
        use nalgebra::{DMatrix, DVector};
        let n = 4;
        let p = CscMatrix::from_triplets(
            n,
            n,
            &[
                (0, 0, 4.0),
                (1, 1, 3.0),
                (2, 2, 2.0),
                (3, 3, 5.0),
                (0, 1, 1.0),
                (1, 0, 1.0),
            ],
        );
        let a_eq = CscMatrix::from_triplets(2, n, &[(0, 0, 1.0), (0, 1, 1.0), (1, 2, 1.0), (1, 3, -1.0)]);
        let inst = QpInstance {
            n,
            p: p.clone(),
            q: vec![1.0, -2.0, 0.5, 0.0],
            c0: 0.0,
            a_eq: a_eq.clone(),
            b_eq: vec![1.0, 0.5],
            a_in: empty(n),
            b_in: vec![],
            lb: vec![f64::NEG_INFINITY; n],
            ub: vec![f64::INFINITY; n],
        };
        let res = solve_qp(&inst, 1e-9, 50_000);
        assert_eq!(res.status, QpStatus::Optimal);
        // dense oracle: [[P, Aᵀ],[A, 0]] [x; λ] = [−q; b]
        let mut kkt = DMatrix::<f64>::zeros(n + 2, n + 2);
        for (i, j, v) in p.iter() {
            kkt[(i, j)] += v;
        }
        for (r, c, v) in a_eq.iter() {
            kkt[(n + r, c)] = v;
            kkt[(c, n + r)] = v;
        }
        let rhs = DVector::from_vec(vec![-1.0, 2.0, -0.5, 0.0, 1.0, 0.5]);
        let sol = kkt.lu().solve(&rhs).unwrap();
        for j in 0..n {
            assert!(
                (res.x[j] - sol[j]).abs() < 1e-8,
                "x[{j}] = {} vs oracle {}",
                res.x[j],
                sol[j]
            );
        }
    }

    /// x ≥ 1 and x ≤ 0 cannot hold: a verified certificate must be produced.
    #[test]
    fn empty_feasible_set_certified() {
        let inst = QpInstance {
            n: 1,
            p: CscMatrix::from_triplets(1, 1, &[(0, 0, 2.0)]),
            q: vec![0.0],
            c0: 0.0,
            a_eq: empty(1),
            b_eq: vec![],
            a_in: CscMatrix::from_triplets(2, 1, &[(0, 0, 1.0), (1, 0, -1.0)]),
            b_in: vec![0.0, -1.0], // x ≤ 0, −x ≤ −1 (x ≥ 1)
            lb: vec![f64::NEG_INFINITY],
            ub: vec![f64::INFINITY],
        };
        let res = solve_qp(&inst, 1e-8, 50_000);
        assert_eq!(res.status, QpStatus::PrimalInfeasible);
        let cert = res.certificate.expect("certificate attached");
        assert!(res.certificate_violation >= 1e-9);
        assert!(crate::sparse::inf_norm(&cert) > 0.0);
    }

    fn random_feasible_qp(seed: u64, n: usize) -> QpInstance {
        // deterministic congruential data
        let mut s = seed;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let mut ptrips = Vec::new();
        for j in 0..n {
            ptrips.push((j, j, 1.0 + next().abs() * 3.0));
        }
        for j in 1..n {
            let v = 0.3 * next();
            ptrips.push((j - 1, j, v));
            ptrips.push((j, j - 1, v));
        }
        let me = n / 3;
        let mut etrips = Vec::new();
        let mut beq = Vec::new();
        for r in 0..me {
            for j in 0..n {
                if (j + r) % 3 == 0 {
                    etrips.push((r, j, next()));
                }
            }
            beq.push(0.3 * next());
        }
        QpInstance {
            n,
            p: CscMatrix::from_triplets(n, n, &ptrips),
            q: (0..n).map(|_| next()).collect(),
            c0: 0.0,
            a_eq: CscMatrix::from_triplets(me, n, &etrips),
            b_eq: beq,
            a_in: empty(n),
            b_in: vec![],
            lb: vec![-5.0; n],
            ub: vec![5.0; n],
        }
    }

    /// Warm vs cold on random feasible QPs: same status and objective.
    #[test]
    fn warm_matches_cold_on_random_qps() {
        for seed in 0..100u64 {
            let inst = random_feasible_qp(seed + 1, 8);
            let cold = solve_qp(&inst, 1e-9, 50_000);
            assert_eq!(cold.status, QpStatus::Optimal, "seed {seed}");
            let warm = warm_solve(&inst, &cold, 1e-9, 50_000);
            assert_eq!(warm.status, QpStatus::Optimal);
            assert!(
                (warm.objective - cold.objective).abs() <= 1e-7 * (1.0 + cold.objective.abs()),
                "seed {seed}: {} vs {}",
                warm.objective,
                cold.objective
            );
            assert!(warm.iterations <= cold.iterations);
        }
    }

    /// An added bound that is inactive at the parent optimum keeps the warm
    /// start fast; an incompatible bound pair still certifies infeasibility.
    #[test]
    fn warm_start_contract_cases() {
        let inst = random_feasible_qp(7, 6);
        let cold = solve_qp(&inst, 1e-9, 50_000);
        let mut relaxed = inst.clone();
        for j in 0..relaxed.n {
            relaxed.lb[j] = relaxed.lb[j].min(cold.x[j] - 1.0);
            relaxed.ub[j] = relaxed.ub[j].max(cold.x[j] + 1.0);
        }
        let mut bounded = relaxed.clone();
        bounded.ub[0] = cold.x[0] + 0.5; // inactive at the optimum
        let warm = warm_solve(&bounded, &cold, 1e-9, 50_000);
        assert_eq!(warm.status, QpStatus::Optimal);
        assert!(warm.iterations <= cold.iterations);

        let mut infeas = inst.clone();
        infeas.lb[1] = 1.0;
        infeas.ub[1] = 0.0; // conflicting box handled as l > u
        // represent as two inequality rows instead to keep l ≤ u semantics
        infeas.lb[1] = f64::NEG_INFINITY;
        infeas.ub[1] = f64::INFINITY;
        let rows = CscMatrix::from_triplets(2, infeas.n, &[(0, 1, 1.0), (1, 1, -1.0)]);
        infeas.a_in = rows;
        infeas.b_in = vec![0.0, -1.0];
        let warm_inf = warm_solve(&infeas, &cold, 1e-8, 50_000);
        assert_eq!(warm_inf.status, QpStatus::PrimalInfeasible);
    }

    /// Adding a constraint never lowers the optimum by more than tolerance.
    #[test]
    fn monotone_under_restriction() {
        for seed in 0..20u64 {
            let inst = random_feasible_qp(seed * 13 + 3, 7);
            let base = solve_qp(&inst, 1e-9, 50_000);
            let mut tighter = inst.clone();
            // shrink a box interval around the optimum point slightly away from it
            let j = (seed as usize) % tighter.n;
            tighter.ub[j] = base.x[j] - 0.05;
            if tighter.ub[j] < tighter.lb[j] {
                continue;
            }
            let restricted = solve_qp(&tighter, 1e-9, 50_000);
            if restricted.status == QpStatus::Optimal {
                assert!(restricted.objective >= base.objective - 1e-7 * (1.0 + base.objective.abs()));
            }
        }
    }

    /// Determinism: identical instance gives bitwise-identical outputs.
    #[test]
    fn deterministic_resolve() {
        let inst = random_feasible_qp(42, 9);
        let r1 = solve_qp(&inst, 1e-9, 50_000);
        let r2 = solve_qp(&inst, 1e-9, 50_000);
        assert_eq!(r1.status, r2.status);
        assert_eq!(r1.objective.to_bits(), r2.objective.to_bits());
        assert_eq!(r1.iterations, r2.iterations);
    }

    #[test]
    fn psd_probe_distinguishes() {
        let psd = CscMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (1, 1, 0.0)]);
        assert!(super::psd_probe(&psd));
        let indef = CscMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (1, 1, -1.0)]);
        assert!(!super::psd_probe(&indef));
    }
}
