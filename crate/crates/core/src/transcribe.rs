//! Symmetry reduction, discretization, and assembly of the standard-form MIQP.
//!
//! All K windings are represented on the reduced domain [0, 2π/(K·N_p)];
//! pointwise constraints hold at θ_0..θ_{T−1} and the forward difference at
//! t = T−1 wraps to the permuted θ_0 values, which realizes the phase-shift
//! periodicity without variables at index T. Averages over the cycle reduce
//! to (1/T)·Σ_t by the symmetry scaling.
//!
//! Emitted row families (tagged per row for the coverage self-test):
//!
//! | tag | rows |
//! |-----|------|
//! | (a) `Dynamics`      | v_t = R i_t + ω(λ_{t+1} − λ_t)/Δθ, t < T−1 |
//! | (b) `MeshFlux`      | ψ_t = Mᵀ φ_t |
//! | (c) `Ampere`        | M F_t = C i_t |
//! | (d) `FluxLinkage`   | λ_t = Cᵀ φ_t |
//! | (e) `PwaFlux`/`PwaMmf`/`SosSum`/`ZBound` | disjunctive PWA encoding |
//! | (f) `Torque`        | τ_t = Σ_k Σ_j c z + d s |
//! | (g) `VoltageLimit`/`CurrentLimit` | |v| ≤ v_max (rows), optional |i| ≤ i_max |
//! | (h) `AvgTorque`     | (1/T) Σ_t τ_t = τ_des |
//! | (i) `Glue`          | the wrapped t = T−1 dynamics rows |

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::MotorModel;
use crate::persp::{Cut, Perspective};
use crate::pwa::PwaCharacteristic;
use crate::qp::QpInstance;
use crate::sparse::{CscMatrix, TripletBuilder};
use crate::waveform::{Metrics, WaveformSolution};

#[derive(Debug, Error)]
pub enum TranscribeError {
    #[error("grid angle θ_{t} = {theta} not found among the fitted PWA angles")]
    AngleMismatch { t: usize, theta: f64 },
    #[error("alpha must be nonnegative, got {0}")]
    NegativeAlpha(f64),
    #[error("perspective build failed: {0}")]
    Perspective(#[from] crate::persp::PerspError),
    #[error("solution vector length {got}, layout expects {want}")]
    LengthMismatch { got: usize, want: usize },
}

/// Uniform discretization of the reduced domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Grid {
    pub t_count: usize,
    pub theta: Vec<f64>,
    pub delta: f64,
    pub span: f64,
}

impl Grid {
    pub fn new(model: &MotorModel, t_count: usize) -> Grid {
        assert!(t_count >= 1);
        let span = model.reduced_span();
        let theta = (0..=t_count)
            .map(|t| span * t as f64 / t_count as f64)
            .collect();
        Grid {
            t_count,
            theta,
            delta: span / t_count as f64,
            span,
        }
    }
}

/// Row tags; letters refer to the families in the module docs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RowKind {
    Dynamics,
    MeshFlux,
    Ampere,
    FluxLinkage,
    PwaFlux,
    PwaMmf,
    SosSum,
    Torque,
    AvgTorque,
    Glue,
    VoltageLimit,
    CurrentLimit,
    ZBound,
    PerspectiveCut,
}

/// Index arithmetic for the per-gridpoint variable blocks
/// [i | v | λ | F | ψ | φ | τ | z | s | w?].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Layout {
    pub n: usize,
    pub m: usize,
    pub l: usize,
    pub regions: usize,
    pub t_count: usize,
    pub perspective: bool,
    stride: usize,
}

impl Layout {
    pub fn new(n: usize, m: usize, l: usize, regions: usize, t_count: usize, perspective: bool) -> Layout {
        let stride = 3 * n + 2 * m + l + 1 + (2 + perspective as usize) * m * regions;
        Layout {
            n,
            m,
            l,
            regions,
            t_count,
            perspective,
            stride,
        }
    }

    pub fn n_vars(&self) -> usize {
        self.stride * self.t_count
    }

    #[inline]
    fn base(&self, t: usize) -> usize {
        debug_assert!(t < self.t_count);
        t * self.stride
    }

    pub fn i(&self, t: usize, k: usize) -> usize {
        self.base(t) + k
    }

    pub fn v(&self, t: usize, k: usize) -> usize {
        self.base(t) + self.n + k
    }

    pub fn lambda(&self, t: usize, k: usize) -> usize {
        self.base(t) + 2 * self.n + k
    }

    pub fn f(&self, t: usize, e: usize) -> usize {
        self.base(t) + 3 * self.n + e
    }

    pub fn psi(&self, t: usize, e: usize) -> usize {
        self.base(t) + 3 * self.n + self.m + e
    }

    pub fn phi(&self, t: usize, j: usize) -> usize {
        self.base(t) + 3 * self.n + 2 * self.m + j
    }

    pub fn tau(&self, t: usize) -> usize {
        self.base(t) + 3 * self.n + 2 * self.m + self.l
    }

    pub fn z(&self, t: usize, e: usize, j: usize) -> usize {
        self.base(t) + 3 * self.n + 2 * self.m + self.l + 1 + e * self.regions + j
    }

    pub fn s(&self, t: usize, e: usize, j: usize) -> usize {
        self.base(t) + 3 * self.n + 2 * self.m + self.l + 1 + self.m * self.regions + e * self.regions + j
    }

    pub fn w(&self, t: usize, e: usize, j: usize) -> usize {
        debug_assert!(self.perspective);
        self.base(t) + 3 * self.n + 2 * self.m + self.l + 1 + 2 * self.m * self.regions + e * self.regions + j
    }
}

/// One SOS1 group: the region selectors of element `element` at grid point `t`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SosGroup {
    pub element: usize,
    pub t: usize,
    pub s_indices: Vec<usize>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TranscribeOptions {
    pub perspective: bool,
}

/// Standard-form MIQP: ½xᵀPx + qᵀx + c₀ over sparse equalities, inequalities
/// and box bounds, with the binary structure carried as SOS1 groups.
#[derive(Debug, Clone)]
pub struct TranscribedProblem {
    pub layout: Layout,
    pub grid: Grid,
    pub omega: f64,
    pub tau_des: f64,
    pub alpha: f64,
    pub breakpoints: Vec<f64>,
    pub p: CscMatrix,
    pub q: Vec<f64>,
    pub c0: f64,
    pub a_eq: CscMatrix,
    pub b_eq: Vec<f64>,
    pub eq_kinds: Vec<RowKind>,
    pub a_in: CscMatrix,
    pub b_in: Vec<f64>,
    pub in_kinds: Vec<RowKind>,
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
    pub sos1_groups: Vec<SosGroup>,
    pub perspective: Option<Perspective>,
    /// PWA θ-column backing each grid index.
    pub theta_col: Vec<usize>,
    pub model: MotorModel,
    pub pwa: PwaCharacteristic,
}

/// Assemble the MIQP from the model, fitted PWA data, grid, and scenario.
pub fn transcribe(
    model: &MotorModel,
    pwa: &PwaCharacteristic,
    grid: &Grid,
    omega: f64,
    tau_des: f64,
    alpha: f64,
    opts: TranscribeOptions,
) -> Result<TranscribedProblem, TranscribeError> {
    if alpha < 0.0 {
        return Err(TranscribeError::NegativeAlpha(alpha));
    }
    let (n, m, l) = (model.n_windings, model.m_elements, model.l_meshes);
    let regions = pwa.n_regions();
    let t_count = grid.t_count;
    let layout = Layout::new(n, m, l, regions, t_count, opts.perspective);
    let nv = layout.n_vars();
    let bp = &pwa.breakpoints;

    // pin each grid angle to a fitted PWA column
    let mut theta_col = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let col = pwa
            .theta_index(grid.theta[t])
            .ok_or(TranscribeError::AngleMismatch {
                t,
                theta: grid.theta[t],
            })?;
        theta_col.push(col);
    }

    let persp = if opts.perspective {
        Some(Perspective::build(model)?)
    } else {
        None
    };

    // ---------------- equality rows ----------------
    let mut eq = TripletBuilder::new(nv);
    let mut eq_kinds = Vec::new();
    let w_over_d = omega / grid.delta;
    let mut row: Vec<(usize, f64)> = Vec::with_capacity(16);

    for t in 0..t_count {
        let tc = theta_col[t];
        // (a)/(i) electrical dynamics with forward difference; the last grid
        // point wraps onto the permuted first one
        for k in 0..n {
            row.clear();
            row.push((layout.v(t, k), 1.0));
            row.push((layout.i(t, k), -model.resistance[k]));
            if t + 1 < t_count {
                row.push((layout.lambda(t + 1, k), -w_over_d));
                row.push((layout.lambda(t, k), w_over_d));
                eq.push_row(&row, 0.0);
                eq_kinds.push(RowKind::Dynamics);
            } else {
                let glued = model.winding_shift[k];
                row.push((layout.lambda(0, glued), -w_over_d));
                row.push((layout.lambda(t, k), w_over_d));
                eq.push_row(&row, 0.0);
                eq_kinds.push(RowKind::Glue);
            }
        }
        // (b) ψ = Mᵀφ
        for e in 0..m {
            row.clear();
            row.push((layout.psi(t, e), 1.0));
            for j in 0..l {
                row.push((layout.phi(t, j), -model.mesh_matrix[(j, e)]));
            }
            eq.push_row(&row, 0.0);
            eq_kinds.push(RowKind::MeshFlux);
        }
        // (c) M F = C i
        for j in 0..l {
            row.clear();
            for e in 0..m {
                row.push((layout.f(t, e), model.mesh_matrix[(j, e)]));
            }
            for k in 0..n {
                row.push((layout.i(t, k), -model.geometry_matrix[(j, k)]));
            }
            eq.push_row(&row, 0.0);
            eq_kinds.push(RowKind::Ampere);
        }
        // (d) λ = Cᵀφ
        for k in 0..n {
            row.clear();
            row.push((layout.lambda(t, k), 1.0));
            for j in 0..l {
                row.push((layout.phi(t, j), -model.geometry_matrix[(j, k)]));
            }
            eq.push_row(&row, 0.0);
            eq_kinds.push(RowKind::FluxLinkage);
        }
        // (e) disjunctive PWA rows
        for e in 0..m {
            let el = &pwa.elements[e];
            row.clear();
            row.push((layout.psi(t, e), 1.0));
            for j in 0..regions {
                row.push((layout.z(t, e, j), -el.a[tc][j]));
                row.push((layout.s(t, e, j), -el.b[tc][j]));
            }
            eq.push_row(&row, 0.0);
            eq_kinds.push(RowKind::PwaFlux);

            row.clear();
            row.push((layout.f(t, e), 1.0));
            for j in 0..regions {
                row.push((layout.z(t, e, j), -1.0));
            }
            eq.push_row(&row, 0.0);
            eq_kinds.push(RowKind::PwaMmf);

            row.clear();
            for j in 0..regions {
                row.push((layout.s(t, e, j), 1.0));
            }
            eq.push_row(&row, 1.0);
            eq_kinds.push(RowKind::SosSum);
        }
        // (f) torque
        row.clear();
        row.push((layout.tau(t), 1.0));
        for e in 0..m {
            let el = &pwa.elements[e];
            for j in 0..regions {
                row.push((layout.z(t, e, j), -el.c[tc][j]));
                row.push((layout.s(t, e, j), -el.d[tc][j]));
            }
        }
        eq.push_row(&row, 0.0);
        eq_kinds.push(RowKind::Torque);
    }
    // (h) average torque
    row.clear();
    for t in 0..t_count {
        row.push((layout.tau(t), 1.0 / t_count as f64));
    }
    eq.push_row(&row, tau_des);
    eq_kinds.push(RowKind::AvgTorque);

    // ---------------- inequality rows ----------------
    let mut ineq = TripletBuilder::new(nv);
    let mut in_kinds = Vec::new();
    for t in 0..t_count {
        // (g) |v| ≤ v_max as two rows per winding
        for k in 0..n {
            ineq.push_row(&[(layout.v(t, k), 1.0)], model.v_max);
            in_kinds.push(RowKind::VoltageLimit);
            ineq.push_row(&[(layout.v(t, k), -1.0)], model.v_max);
            in_kinds.push(RowKind::VoltageLimit);
        }
        if let Some(imax) = model.i_max {
            for k in 0..n {
                ineq.push_row(&[(layout.i(t, k), 1.0)], imax);
                in_kinds.push(RowKind::CurrentLimit);
                ineq.push_row(&[(layout.i(t, k), -1.0)], imax);
                in_kinds.push(RowKind::CurrentLimit);
            }
        }
        // (e) region bounds F̃^{j−1} s ≤ z ≤ F̃^j s
        for e in 0..m {
            for j in 0..regions {
                ineq.push_row(&[(layout.z(t, e, j), 1.0), (layout.s(t, e, j), -bp[j + 1])], 0.0);
                in_kinds.push(RowKind::ZBound);
                ineq.push_row(&[(layout.z(t, e, j), -1.0), (layout.s(t, e, j), bp[j])], 0.0);
                in_kinds.push(RowKind::ZBound);
            }
        }
    }

    // ---------------- bounds ----------------
    let mut lb = vec![f64::NEG_INFINITY; nv];
    let mut ub = vec![f64::INFINITY; nv];
    let f_lo = bp[0];
    let f_hi = bp[regions];
    for t in 0..t_count {
        for k in 0..n {
            ub[layout.v(t, k)] = model.v_max;
            lb[layout.v(t, k)] = -model.v_max;
            if let Some(imax) = model.i_max {
                ub[layout.i(t, k)] = imax;
                lb[layout.i(t, k)] = -imax;
            }
        }
        for e in 0..m {
            lb[layout.f(t, e)] = f_lo;
            ub[layout.f(t, e)] = f_hi;
            for j in 0..regions {
                lb[layout.z(t, e, j)] = bp[j].min(0.0);
                ub[layout.z(t, e, j)] = bp[j + 1].max(0.0);
                lb[layout.s(t, e, j)] = 0.0;
                ub[layout.s(t, e, j)] = 1.0;
                if opts.perspective {
                    lb[layout.w(t, e, j)] = 0.0;
                    ub[layout.w(t, e, j)] = (bp[j] * bp[j]).max(bp[j + 1] * bp[j + 1]);
                }
            }
        }
    }

    // ---------------- objective ----------------
    let weight = 1.0 / t_count as f64;
    let mut ptrips: Vec<(usize, usize, f64)> = Vec::new();
    let mut q = vec![0.0; nv];
    for t in 0..t_count {
        ptrips.push((layout.tau(t), layout.tau(t), 2.0 * alpha * weight));
        q[layout.tau(t)] = -2.0 * alpha * tau_des * weight;
        match &persp {
            None => {
                for k in 0..n {
                    ptrips.push((layout.i(t, k), layout.i(t, k), 2.0 * model.resistance[k] * weight));
                }
            }
            Some(ps) => {
                for e in 0..m {
                    for e2 in 0..m {
                        let val = ps.q[(e, e2)] - if e == e2 { ps.d[e] } else { 0.0 };
                        if val != 0.0 {
                            ptrips.push((layout.f(t, e), layout.f(t, e2), 2.0 * val * weight));
                        }
                    }
                    for j in 0..regions {
                        q[layout.w(t, e, j)] = ps.d[e] * weight;
                    }
                }
            }
        }
    }
    let c0 = alpha * tau_des * tau_des;

    let mut groups = Vec::with_capacity(m * t_count);
    for t in 0..t_count {
        for e in 0..m {
            groups.push(SosGroup {
                element: e,
                t,
                s_indices: (0..regions).map(|j| layout.s(t, e, j)).collect(),
            });
        }
    }

    Ok(TranscribedProblem {
        layout,
        grid: grid.clone(),
        omega,
        tau_des,
        alpha,
        breakpoints: bp.clone(),
        p: CscMatrix::from_triplets(nv, nv, &ptrips),
        q,
        c0,
        a_eq: eq.build(),
        b_eq: eq.rhs,
        eq_kinds,
        a_in: ineq.build(),
        b_in: ineq.rhs,
        in_kinds,
        lb,
        ub,
        sos1_groups: groups,
        perspective: persp,
        theta_col,
        model: model.clone(),
        pwa: pwa.clone(),
    })
}

impl TranscribedProblem {
    pub fn n_vars(&self) -> usize {
        self.layout.n_vars()
    }

    pub fn n_binaries(&self) -> usize {
        self.layout.m * self.layout.regions * self.layout.t_count
    }

    /// Continuous relaxation (binaries already boxed to [0,1]) with the given
    /// perspective cuts appended as inequality rows.
    pub fn relaxation(&self, cuts: &[Cut]) -> QpInstance {
        let mut a_in = self.a_in.clone();
        let mut b_in = self.b_in.clone();
        if !cuts.is_empty() {
            assert!(self.layout.perspective, "cuts need epigraph variables");
            let mut tb = TripletBuilder::new(self.n_vars());
            for c in cuts {
                tb.push_row(
                    &[
                        (self.layout.w(c.t, c.element, c.region), -1.0),
                        (self.layout.z(c.t, c.element, c.region), c.coef_z),
                        (self.layout.s(c.t, c.element, c.region), c.coef_s),
                    ],
                    0.0,
                );
            }
            a_in = a_in.vstack(&tb.build());
            b_in.extend_from_slice(&tb.rhs);
        }
        QpInstance {
            n: self.n_vars(),
            p: self.p.clone(),
            q: self.q.clone(),
            c0: self.c0,
            a_eq: self.a_eq.clone(),
            b_eq: self.b_eq.clone(),
            a_in,
            b_in,
            lb: self.lb.clone(),
            ub: self.ub.clone(),
        }
    }

    /// Set of emitted row kinds; the coverage self-test asserts completeness.
    pub fn row_coverage(&self) -> std::collections::BTreeSet<RowKind> {
        self.eq_kinds
            .iter()
            .chain(self.in_kinds.iter())
            .copied()
            .collect()
    }

    /// Every constraint family of the continuous problem must be represented.
    pub fn coverage_complete(&self) -> bool {
        use RowKind::*;
        let cov = self.row_coverage();
        let mut need = vec![MeshFlux, Ampere, FluxLinkage, PwaFlux, PwaMmf, SosSum, Torque, AvgTorque, Glue, VoltageLimit, ZBound];
        if self.layout.t_count > 1 {
            need.push(Dynamics);
        }
        if self.model.i_max.is_some() {
            need.push(CurrentLimit);
        }
        need.into_iter().all(|k| cov.contains(&k))
    }

    /// Unpack a raw solution vector into trajectories and metrics.
    pub fn assemble_waveforms(&self, x: &[f64]) -> Result<WaveformSolution, TranscribeError> {
        if x.len() != self.n_vars() {
            return Err(TranscribeError::LengthMismatch {
                got: x.len(),
                want: self.n_vars(),
            });
        }
        let lt = &self.layout;
        let t_count = lt.t_count;
        let take = |f: &dyn Fn(usize, usize) -> usize, count: usize| -> Vec<Vec<f64>> {
            (0..count)
                .map(|k| (0..t_count).map(|t| x[f(t, k)]).collect())
                .collect()
        };
        let current = take(&|t, k| lt.i(t, k), lt.n);
        let voltage = take(&|t, k| lt.v(t, k), lt.n);
        let flux_linkage = take(&|t, k| lt.lambda(t, k), lt.n);
        let mmf = take(&|t, e| lt.f(t, e), lt.m);
        let element_flux = take(&|t, e| lt.psi(t, e), lt.m);
        let mesh_flux = take(&|t, j| lt.phi(t, j), lt.l);
        let torque: Vec<f64> = (0..t_count).map(|t| x[lt.tau(t)]).collect();
        let region_choice = (0..lt.m)
            .map(|e| {
                (0..t_count)
                    .map(|t| {
                        (0..lt.regions)
                            .max_by(|&a, &b| {
                                x[lt.s(t, e, a)]
                                    .partial_cmp(&x[lt.s(t, e, b)])
                                    .unwrap_or(std::cmp::Ordering::Equal)
                            })
                            .unwrap_or(0)
                    })
                    .collect()
            })
            .collect();

        let tw = 1.0 / t_count as f64;
        let tau_avg = torque.iter().sum::<f64>() * tw;
        let ripple = torque.iter().map(|&v| (v - tau_avg) * (v - tau_avg)).sum::<f64>() * tw;
        let p_loss = (0..t_count)
            .map(|t| {
                (0..lt.n)
                    .map(|k| self.model.resistance[k] * current[k][t] * current[k][t])
                    .sum::<f64>()
            })
            .sum::<f64>()
            * tw;
        let v_peak = voltage
            .iter()
            .flat_map(|r| r.iter())
            .fold(0.0f64, |a, &b| a.max(b.abs()));
        let objective = p_loss
            + self.alpha
                * torque
                    .iter()
                    .map(|&v| (v - self.tau_des) * (v - self.tau_des))
                    .sum::<f64>()
                * tw;

        Ok(WaveformSolution {
            theta: self.grid.theta[..t_count].to_vec(),
            delta: self.grid.delta,
            span: self.grid.span,
            pole_period: self.model.pole_period(),
            phase_count: self.model.phase_count,
            winding_shift: self.model.winding_shift.clone(),
            element_shift: self.model.element_shift.clone(),
            mesh_shift: self.model.mesh_shift.clone(),
            current,
            voltage,
            flux_linkage,
            mmf,
            element_flux,
            mesh_flux,
            torque,
            region_choice,
            raw: x.to_vec(),
            metrics: Metrics {
                tau_avg,
                ripple,
                p_loss,
                v_peak,
                objective,
            },
        })
    }

    /// Row-level feasibility audit of a candidate point.
    pub fn check_point(&self, x: &[f64], cuts: &[Cut]) -> CheckReport {
        let ax = self.a_eq.mul_vec(x);
        let mut eq_residual = 0.0f64;
        for i in 0..ax.len() {
            eq_residual = eq_residual.max((ax[i] - self.b_eq[i]).abs());
        }
        let av = self.a_in.mul_vec(x);
        let mut in_violation = 0.0f64;
        for i in 0..av.len() {
            in_violation = in_violation.max(av[i] - self.b_in[i]);
        }
        let mut bound_violation = 0.0f64;
        for j in 0..x.len() {
            bound_violation = bound_violation.max(self.lb[j] - x[j]).max(x[j] - self.ub[j]);
        }
        let lt = &self.layout;
        let mut binaries_integral = true;
        let mut disjunctive_ok = true;
        let mut cut_violation = 0.0f64;
        for g in &self.sos1_groups {
            let mut on = 0usize;
            let mut chosen = usize::MAX;
            for (j, &si) in g.s_indices.iter().enumerate() {
                let sv = x[si];
                if sv != 0.0 && sv != 1.0 {
                    binaries_integral = false;
                }
                if sv > 0.5 {
                    on += 1;
                    chosen = j;
                }
            }
            if on != 1 {
                disjunctive_ok = false;
                continue;
            }
            for j in 0..lt.regions {
                let zv = x[lt.z(g.t, g.element, j)];
                if j == chosen {
                    let lo = self.breakpoints[j] - 1e-8 * (1.0 + self.breakpoints[j].abs());
                    let hi = self.breakpoints[j + 1] + 1e-8 * (1.0 + self.breakpoints[j + 1].abs());
                    if zv < lo || zv > hi {
                        disjunctive_ok = false;
                    }
                } else if zv.abs() > 1e-8 * (1.0 + self.breakpoints[lt.regions].abs()) {
                    disjunctive_ok = false;
                }
            }
            // F inside the chosen region up to tolerance is implied by PwaMmf
        }
        for c in cuts {
            let w = x[lt.w(c.t, c.element, c.region)];
            let z = x[lt.z(c.t, c.element, c.region)];
            let s = x[lt.s(c.t, c.element, c.region)];
            cut_violation = cut_violation.max(c.coef_z * z + c.coef_s * s - w);
        }
        // ripple identity: with the average-torque row active, the objective
        // ripple term equals the definitional ripple
        let t_count = lt.t_count;
        let tw = 1.0 / t_count as f64;
        let tau: Vec<f64> = (0..t_count).map(|t| x[lt.tau(t)]).collect();
        let tau_avg = tau.iter().sum::<f64>() * tw;
        let ripple_def = tau.iter().map(|&v| (v - tau_avg) * (v - tau_avg)).sum::<f64>() * tw;
        let ripple_obj = tau
            .iter()
            .map(|&v| (v - self.tau_des) * (v - self.tau_des))
            .sum::<f64>()
            * tw;
        let ripple_identity_gap = (ripple_obj - ripple_def - (tau_avg - self.tau_des) * (tau_avg - self.tau_des)).abs();

        CheckReport {
            eq_residual,
            in_violation: in_violation.max(0.0),
            bound_violation: bound_violation.max(0.0),
            binaries_integral,
            disjunctive_ok,
            cut_violation: cut_violation.max(0.0),
            ripple_identity_gap,
        }
    }

    /// Sparse text dump of the MIQP for differential testing.
    ///
    /// Format: one `section <name> <rows> <cols|len>` header per block, then
    /// `i j v` triplets (objective, equalities, inequalities), `i v` pairs
    /// (linear terms, rhs, bounds), and one `group <element> <t> idx...` line
    /// per SOS1 group. All indices 0-based.
    pub fn dump_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "reluct-miqp v1 nvars {} t {} regions {}\n",
            self.n_vars(),
            self.layout.t_count,
            self.layout.regions
        ));
        let tri = |name: &str, m: &CscMatrix, out: &mut String| {
            out.push_str(&format!("section {name} {} {} nnz {}\n", m.nrows, m.ncols, m.nnz()));
            for (i, j, v) in m.iter() {
                out.push_str(&format!("{i} {j} {v}\n"));
            }
        };
        tri("objective_p", &self.p, &mut out);
        out.push_str(&format!("section objective_q {} c0 {}\n", self.q.len(), self.c0));
        for (j, v) in self.q.iter().enumerate() {
            if *v != 0.0 {
                out.push_str(&format!("{j} {v}\n"));
            }
        }
        tri("eq", &self.a_eq, &mut out);
        out.push_str(&format!("section eq_rhs {}\n", self.b_eq.len()));
        for (i, v) in self.b_eq.iter().enumerate() {
            out.push_str(&format!("{i} {v}\n"));
        }
        tri("ineq", &self.a_in, &mut out);
        out.push_str(&format!("section ineq_rhs {}\n", self.b_in.len()));
        for (i, v) in self.b_in.iter().enumerate() {
            out.push_str(&format!("{i} {v}\n"));
        }
        out.push_str(&format!("section bounds {}\n", self.n_vars()));
        for j in 0..self.n_vars() {
            out.push_str(&format!("{j} {} {}\n", self.lb[j], self.ub[j]));
        }
        out.push_str(&format!("section sos1 {}\n", self.sos1_groups.len()));
        for g in &self.sos1_groups {
            let idx: Vec<String> = g.s_indices.iter().map(|i| i.to_string()).collect();
            out.push_str(&format!("group {} {} {}\n", g.element, g.t, idx.join(" ")));
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CheckReport {
    pub eq_residual: f64,
    pub in_violation: f64,
    pub bound_violation: f64,
    pub binaries_integral: bool,
    pub disjunctive_ok: bool,
    pub cut_violation: f64,
    pub ripple_identity_gap: f64,
}

impl CheckReport {
    /// The incumbent acceptance thresholds.
    pub fn feasible(&self) -> bool {
        self.eq_residual <= 1e-6
            && self.in_violation <= 1e-8
            && self.bound_violation <= 1e-8
            && self.binaries_integral
            && self.disjunctive_ok
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{example_motor_sampled, linspace, MotorModel, SampledSurface};
    use crate::pwa::fit_model;

    pub(crate) fn toy_model() -> MotorModel {
        let mmf = linspace(0.0, 100.0, 41);
        let span = 2.0 * std::f64::consts::PI;
        let theta = linspace(0.0, span, 5);
        let values = mmf
            .iter()
            .map(|&f| {
                theta
                    .iter()
                    .map(|&th| (2e-3 + 1e-3 * th.cos()) * 30.0 * (1.0 - (-f / 30.0).exp()))
                    .collect()
            })
            .collect();
        MotorModel {
            name: "toy".into(),
            n_windings: 1,
            m_elements: 1,
            l_meshes: 1,
            resistance: vec![0.5],
            mesh_matrix: nalgebra::DMatrix::identity(1, 1),
            geometry_matrix: nalgebra::DMatrix::from_element(1, 1, 10.0),
            v_max: 50.0,
            i_max: None,
            pole_pairs: 1,
            phase_count: 1,
            winding_shift: vec![0],
            element_shift: vec![0],
            mesh_shift: vec![0],
            permanent_magnet: false,
            breakpoints: vec![0.0, 50.0, 100.0],
            flux_char: vec![SampledSurface {
                mmf_grid: mmf,
                theta_grid: theta,
                values,
            }],
        }
    }

    #[test]
    fn example_low_speed_instance_counts() {
        let model = example_motor_sampled(61, 41);
        let pwa = fit_model(&model, &model.breakpoints).unwrap();
        let grid = Grid::new(&model, 40);
        let prob = transcribe(&model, &pwa, &grid, 1000.0 * 2.0 * std::f64::consts::PI / 60.0, 10.0, 3.0, TranscribeOptions::default()).unwrap();
        assert_eq!(prob.n_binaries(), 480); // m · N · T = 3 · 4 · 40
        assert_eq!(prob.sos1_groups.len(), 120);
        let per_element = prob.sos1_groups.iter().filter(|g| g.element == 0).count();
        assert_eq!(per_element, 40); // 40 SOS1 groups per element
        assert!(prob.coverage_complete());
        // Σ s = 1 appears once per group
        let sos_rows = prob.eq_kinds.iter().filter(|&&k| k == RowKind::SosSum).count();
        assert_eq!(sos_rows, 120);
        assert!(prob.relaxation(&[]).objective_is_psd());
    }

    #[test]
    fn single_point_single_region_is_pure_qp() {
        let model = toy_model();
        let pwa = fit_model(&model, &[0.0, 100.0]).unwrap();
        let grid = Grid::new(&model, 1);
        // the single grid angle θ=0 produces no torque for this surface, so
        // ask for none; the structural point is the absent integer freedom
        let prob = transcribe(&model, &pwa, &grid, 10.0, 0.0, 1.0, TranscribeOptions::default()).unwrap();
        assert_eq!(prob.n_binaries(), 1);
        // Σ s = 1 with a single region pins the binary: no integer freedom
        let qp = prob.relaxation(&[]);
        let res = crate::qp::solve_qp(&qp, 1e-9, 50_000);
        assert_eq!(res.status, crate::qp::QpStatus::Optimal);
        let s_idx = prob.layout.s(0, 0, 0);
        assert!((res.x[s_idx] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn origin_is_feasible_for_zero_scenario() {
        // exact affine-through-origin characteristic: b¹ = d¹ = 0
        let mut model = toy_model();
        for (i, &f) in model.flux_char[0].mmf_grid.clone().iter().enumerate() {
            for t in 0..model.flux_char[0].n_theta() {
                model.flux_char[0].values[i][t] = 2e-3 * f;
            }
        }
        let pwa = fit_model(&model, &[0.0, 50.0, 100.0]).unwrap();
        let grid = Grid::new(&model, 4);
        let prob = transcribe(&model, &pwa, &grid, 10.0, 0.0, 0.0, TranscribeOptions::default()).unwrap();
        let mut x = vec![0.0; prob.n_vars()];
        for t in 0..4 {
            x[prob.layout.s(t, 0, 0)] = 1.0;
        }
        let rep = prob.check_point(&x, &[]);
        assert!(rep.feasible(), "{rep:?}");
        let sol = prob.assemble_waveforms(&x).unwrap();
        assert_eq!(sol.metrics.objective, 0.0);
    }

    #[test]
    fn grid_angle_mismatch_rejected() {
        let model = toy_model();
        let pwa = fit_model(&model, &model.breakpoints.clone()).unwrap();
        // a grid with more points than the surface columns cannot match
        let grid = Grid::new(&model, 16);
        let err = transcribe(&model, &pwa, &grid, 10.0, 0.1, 1.0, TranscribeOptions::default()).unwrap_err();
        assert!(matches!(err, TranscribeError::AngleMismatch { .. }));
    }

    #[test]
    fn assemble_metrics_match_direct_summation() {
        let model = toy_model();
        let pwa = fit_model(&model, &model.breakpoints.clone()).unwrap();
        let grid = Grid::new(&model, 4);
        let prob = transcribe(&model, &pwa, &grid, 10.0, 1.0, 2.0, TranscribeOptions::default()).unwrap();
        // zero vector
        let zero = vec![0.0; prob.n_vars()];
        let sol = prob.assemble_waveforms(&zero).unwrap();
        assert_eq!(sol.metrics.tau_avg, 0.0);
        assert_eq!(sol.metrics.ripple, 0.0);
        assert_eq!(sol.metrics.p_loss, 0.0);
        // constant torque → zero ripple
        let mut x = vec![0.0; prob.n_vars()];
        for t in 0..4 {
            x[prob.layout.tau(t)] = 10.0;
        }
        let sol = prob.assemble_waveforms(&x).unwrap();
        assert_eq!(sol.metrics.ripple, 0.0);
        assert!((sol.metrics.tau_avg - 10.0).abs() < 1e-12);
        // pseudo-random vector against a straight re-summation
        let mut state = 123456789u64;
        let mut x = vec![0.0; prob.n_vars()];
        for v in x.iter_mut() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            *v = ((state >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0;
        }
        let sol = prob.assemble_waveforms(&x).unwrap();
        let lt = &prob.layout;
        let mut tau_sum = 0.0;
        let mut loss_sum = 0.0;
        for t in 0..4 {
            tau_sum += x[lt.tau(t)];
            loss_sum += prob.model.resistance[0] * x[lt.i(t, 0)] * x[lt.i(t, 0)];
        }
        assert!((sol.metrics.tau_avg - tau_sum / 4.0).abs() < 1e-12);
        assert!((sol.metrics.p_loss - loss_sum / 4.0).abs() < 1e-12);
        let mut ripple = 0.0;
        for t in 0..4 {
            ripple += (x[lt.tau(t)] - tau_sum / 4.0).powi(2);
        }
        assert!((sol.metrics.ripple - ripple / 4.0).abs() < 1e-12);
        // length mismatch rejected
        assert!(matches!(
            prob.assemble_waveforms(&x[..10]),
            Err(TranscribeError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn dump_has_all_sections() {
        let model = toy_model();
        let pwa = fit_model(&model, &model.breakpoints.clone()).unwrap();
        let grid = Grid::new(&model, 2);
        let prob = transcribe(&model, &pwa, &grid, 10.0, 0.5, 1.0, TranscribeOptions::default()).unwrap();
        let dump = prob.dump_text();
        for sect in ["objective_p", "objective_q", "section eq", "section ineq", "section bounds", "section sos1", "group"] {
            assert!(dump.contains(sect), "missing {sect}");
        }
    }
}
