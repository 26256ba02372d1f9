//! Independent oracles: exhaustive enumeration for small instances, waveform
//! re-evaluation against the sampled (non-PWA) characteristics, and the
//! closed-form cross-check for affine magnetics.
//!
//! The oracles share the QP solver with the main path but assemble their
//! problems independently (no z/s/w encoding), so assembly bugs and solver
//! bugs stay distinguishable.

use thiserror::Error;

use crate::model::{affine_reduction, derive_phase_torque, MotorModel};
use crate::pwa::{eval_g, PwaCharacteristic};
use crate::qp::{solve_qp, QpInstance, QpStatus};
use crate::sparse::{CscMatrix, TripletBuilder};
use crate::transcribe::TranscribedProblem;
use crate::waveform::WaveformSolution;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("enumeration budget exceeded: {assignments} assignments > {budget}")]
    BudgetExceeded { assignments: u128, budget: u128 },
    #[error("waveform grid does not match the model sampling at index {0}")]
    GridMismatch(usize),
    #[error("MMF {value} outside the sampled range of element {element}")]
    OutOfRange { element: usize, value: f64 },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Fit(#[from] crate::pwa::FitError),
}

// ---------------------------------------------------------------------------
// exhaustive enumeration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EnumerationResult {
    /// Best objective over all region assignments; None if all are infeasible.
    pub objective: Option<f64>,
    pub assignment: Vec<usize>,
    pub assignments_total: u128,
    pub feasible_count: usize,
}

/// Solve one QP per SOS1 region assignment and return the best.
///
/// The per-assignment QP is assembled directly in the physical variables
/// (i, v, λ, F, ψ, φ, τ per grid point) with the chosen affine piece
/// substituted, independent of the disjunctive encoding.
pub fn enumerate_global(problem: &TranscribedProblem, budget: u128) -> Result<EnumerationResult, VerifyError> {
    let groups = problem.sos1_groups.len();
    let regions = problem.layout.regions as u128;
    let mut total: u128 = 1;
    for _ in 0..groups {
        total = total.saturating_mul(regions);
        if total > budget {
            return Err(VerifyError::BudgetExceeded {
                assignments: total,
                budget,
            });
        }
    }

    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut feasible = 0usize;
    let mut choice = vec![0usize; groups];
    loop {
        let qp = fixed_assignment_qp(problem, &choice);
        let res = solve_qp(&qp, 1e-9, 100_000);
        if res.status == QpStatus::Optimal {
            feasible += 1;
            if best.as_ref().map_or(true, |(b, _)| res.objective < *b) {
                best = Some((res.objective, choice.clone()));
            }
        }
        // odometer increment
        let mut g = 0;
        loop {
            if g == groups {
                let (objective, assignment) = match best {
                    Some((o, a)) => (Some(o), a),
                    None => (None, vec![]),
                };
                return Ok(EnumerationResult {
                    objective,
                    assignment,
                    assignments_total: total,
                    feasible_count: feasible,
                });
            }
            choice[g] += 1;
            if choice[g] < problem.layout.regions {
                break;
            }
            choice[g] = 0;
            g += 1;
        }
    }
}

/// Independent physical-variable QP for a fixed region assignment.
fn fixed_assignment_qp(problem: &TranscribedProblem, choice: &[usize]) -> QpInstance {
    let model = &problem.model;
    let pwa = &problem.pwa;
    let bp = &problem.breakpoints;
    let (n, m, l) = (model.n_windings, model.m_elements, model.l_meshes);
    let t_count = problem.grid.t_count;
    let stride = 3 * n + 2 * m + l + 1;
    let nv = stride * t_count;
    let iv = |t: usize, k: usize| t * stride + k;
    let vv = |t: usize, k: usize| t * stride + n + k;
    let lv = |t: usize, k: usize| t * stride + 2 * n + k;
    let fv = |t: usize, e: usize| t * stride + 3 * n + e;
    let pv = |t: usize, e: usize| t * stride + 3 * n + m + e;
    let phv = |t: usize, j: usize| t * stride + 3 * n + 2 * m + j;
    let tv = |t: usize| t * stride + 3 * n + 2 * m + l;

    let group_choice = |t: usize, e: usize| -> usize {
        let g = problem
            .sos1_groups
            .iter()
            .position(|g| g.t == t && g.element == e)
            .expect("group exists");
        choice[g]
    };

    let mut eq = TripletBuilder::new(nv);
    let w_over_d = problem.omega / problem.grid.delta;
    let mut row: Vec<(usize, f64)> = Vec::new();
    for t in 0..t_count {
        let tc = problem.theta_col[t];
        for k in 0..n {
            row.clear();
            row.push((vv(t, k), 1.0));
            row.push((iv(t, k), -model.resistance[k]));
            if t + 1 < t_count {
                row.push((lv(t + 1, k), -w_over_d));
            } else {
                row.push((lv(0, model.winding_shift[k]), -w_over_d));
            }
            row.push((lv(t, k), w_over_d));
            eq.push_row(&row, 0.0);
        }
        for e in 0..m {
            row.clear();
            row.push((pv(t, e), 1.0));
            for j in 0..l {
                row.push((phv(t, j), -model.mesh_matrix[(j, e)]));
            }
            eq.push_row(&row, 0.0);
        }
        for j in 0..l {
            row.clear();
            for e in 0..m {
                row.push((fv(t, e), model.mesh_matrix[(j, e)]));
            }
            for k in 0..n {
                row.push((iv(t, k), -model.geometry_matrix[(j, k)]));
            }
            eq.push_row(&row, 0.0);
        }
        for k in 0..n {
            row.clear();
            row.push((lv(t, k), 1.0));
            for j in 0..l {
                row.push((phv(t, j), -model.geometry_matrix[(j, k)]));
            }
            eq.push_row(&row, 0.0);
        }
        // chosen affine piece substituted directly: ψ = a F + b
        for e in 0..m {
            let jc = group_choice(t, e);
            let el = &pwa.elements[e];
            eq.push_row(
                &[(pv(t, e), 1.0), (fv(t, e), -el.a[tc][jc])],
                el.b[tc][jc],
            );
        }
        // τ = Σ_e (c F + d)
        row.clear();
        row.push((tv(t), 1.0));
        let mut d_sum = 0.0;
        for e in 0..m {
            let jc = group_choice(t, e);
            let el = &pwa.elements[e];
            row.push((fv(t, e), -el.c[tc][jc]));
            d_sum += el.d[tc][jc];
        }
        eq.push_row(&row, d_sum);
    }
    row.clear();
    for t in 0..t_count {
        row.push((tv(t), 1.0 / t_count as f64));
    }
    eq.push_row(&row, problem.tau_des);

    let mut lb = vec![f64::NEG_INFINITY; nv];
    let mut ub = vec![f64::INFINITY; nv];
    for t in 0..t_count {
        for k in 0..n {
            lb[vv(t, k)] = -model.v_max;
            ub[vv(t, k)] = model.v_max;
            if let Some(imax) = model.i_max {
                lb[iv(t, k)] = -imax;
                ub[iv(t, k)] = imax;
            }
        }
        for e in 0..m {
            let jc = group_choice(t, e);
            lb[fv(t, e)] = bp[jc];
            ub[fv(t, e)] = bp[jc + 1];
        }
    }

    let weight = 1.0 / t_count as f64;
    let mut ptrips = Vec::new();
    let mut q = vec![0.0; nv];
    for t in 0..t_count {
        for k in 0..n {
            ptrips.push((iv(t, k), iv(t, k), 2.0 * model.resistance[k] * weight));
        }
        ptrips.push((tv(t), tv(t), 2.0 * problem.alpha * weight));
        q[tv(t)] = -2.0 * problem.alpha * problem.tau_des * weight;
    }

    QpInstance {
        n: nv,
        p: CscMatrix::from_triplets(nv, nv, &ptrips),
        q,
        c0: problem.alpha * problem.tau_des * problem.tau_des,
        a_eq: eq.build(),
        b_eq: eq.rhs,
        a_in: CscMatrix::zeros(0, nv),
        b_in: vec![],
        lb,
        ub,
    }
}

// ---------------------------------------------------------------------------
// waveform re-evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct WaveformMetricsReport {
    pub tau_avg: f64,
    pub ripple: f64,
    pub p_loss: f64,
    pub v_peak: f64,
    pub objective: f64,
    /// Torque recomputed from the trajectories.
    pub torque: Vec<f64>,
    /// max |τ_pwa − τ_true| over the grid (only set when use_pwa = false).
    pub pwa_vs_true_gap: f64,
}

/// Recompute the metrics from the trajectories using either the PWA or the
/// original sampled characteristics.
pub fn evaluate_waveforms(
    model: &MotorModel,
    pwa: &PwaCharacteristic,
    sol: &WaveformSolution,
    alpha: f64,
    tau_des: f64,
    use_pwa: bool,
) -> Result<WaveformMetricsReport, VerifyError> {
    let t_count = sol.t_count();
    let m = model.m_elements;
    // match solution angles to fitted columns
    let mut cols = Vec::with_capacity(t_count);
    for (t, &th) in sol.theta.iter().enumerate() {
        cols.push(pwa.theta_index(th).ok_or(VerifyError::GridMismatch(t))?);
    }
    let mut torque_pwa = vec![0.0; t_count];
    for t in 0..t_count {
        for e in 0..m {
            torque_pwa[t] += eval_g(pwa, e, cols[t], sol.mmf[e][t]).map_err(|_| VerifyError::OutOfRange {
                element: e,
                value: sol.mmf[e][t],
            })?;
        }
    }
    let mut torque = torque_pwa.clone();
    let mut gap = 0.0f64;
    if !use_pwa {
        let mut torque_true = vec![0.0; t_count];
        for e in 0..m {
            let g = derive_phase_torque(model, e)?;
            let surf_theta = &model.flux_char[e].theta_grid;
            for t in 0..t_count {
                let col = surf_theta
                    .iter()
                    .position(|&x| (x - sol.theta[t]).abs() <= 1e-9 * (1.0 + x.abs()))
                    .ok_or(VerifyError::GridMismatch(t))?;
                let f = sol.mmf[e][t];
                let grid = &g.mmf_grid;
                if f < grid[0] - 1e-9 || f > grid[grid.len() - 1] + 1e-9 {
                    return Err(VerifyError::OutOfRange {
                        element: e,
                        value: f,
                    });
                }
                torque_true[t] += g.interp_mmf(f, col);
            }
        }
        for t in 0..t_count {
            gap = gap.max((torque_pwa[t] - torque_true[t]).abs());
        }
        torque = torque_true;
    }

    let tw = 1.0 / t_count as f64;
    let tau_avg = torque.iter().sum::<f64>() * tw;
    let ripple = torque.iter().map(|&v| (v - tau_avg) * (v - tau_avg)).sum::<f64>() * tw;
    let p_loss = (0..t_count)
        .map(|t| {
            (0..model.n_windings)
                .map(|k| model.resistance[k] * sol.current[k][t] * sol.current[k][t])
                .sum::<f64>()
        })
        .sum::<f64>()
        * tw;
    let v_peak = sol
        .voltage
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |a, &b| a.max(b.abs()));
    let objective = p_loss
        + alpha * torque.iter().map(|&v| (v - tau_des) * (v - tau_des)).sum::<f64>() * tw;
    Ok(WaveformMetricsReport {
        tau_avg,
        ripple,
        p_loss,
        v_peak,
        objective,
        torque,
        pwa_vs_true_gap: gap,
    })
}

/// Max residual of the glued dynamics rows evaluated on the trajectories:
/// the junction consistency of the unfolded full-period waveform.
pub fn glue_residual(model: &MotorModel, sol: &WaveformSolution, omega: f64) -> f64 {
    let t_last = sol.t_count() - 1;
    let mut worst = 0.0f64;
    for k in 0..model.n_windings {
        let glued = sol.flux_linkage[model.winding_shift[k]][0];
        let r = sol.voltage[k][t_last]
            - model.resistance[k] * sol.current[k][t_last]
            - omega * (glued - sol.flux_linkage[k][t_last]) / sol.delta;
        worst = worst.max(r.abs());
    }
    worst
}

// ---------------------------------------------------------------------------
// affine cross-check
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CrosscheckReport {
    pub micp_objective: f64,
    pub direct_objective: f64,
    pub relative_gap: f64,
}

/// Solve the torque-control problem twice on an affine-characteristic model:
/// through the MICP path (single-region PWA) and through a direct convex QP
/// in (i, v, τ) with λ = L·i + k(θ) eliminated.
pub fn affine_crosscheck(
    model: &MotorModel,
    t_count: usize,
    omega: f64,
    tau_des: f64,
    alpha: f64,
) -> Result<CrosscheckReport, VerifyError> {
    let red = affine_reduction(model)?;
    let grid = crate::transcribe::Grid::new(model, t_count);

    // MICP path: single-region fit over the model breakpoints
    let pwa = crate::pwa::fit_model(model, &[model.breakpoints[0], model.breakpoints[model.breakpoints.len() - 1]])?;
    let prob = crate::transcribe::transcribe(
        model,
        &pwa,
        &grid,
        omega,
        tau_des,
        alpha,
        crate::transcribe::TranscribeOptions::default(),
    )
    .expect("transcription");
    let micp = solve_qp(&prob.relaxation(&[]), 1e-10, 200_000);

    // direct path in (i, v, τ)
    let n = model.n_windings;
    let m = model.m_elements;
    let l = model.l_meshes;
    assert_eq!(m, l, "direct path needs an invertible mesh matrix");
    let m_inv = model
        .mesh_matrix
        .clone()
        .try_inverse()
        .expect("invertible mesh matrix");
    let f_of_i = &m_inv * &model.geometry_matrix; // F = M⁻¹ C i
    let stride = 2 * n + 1;
    let nv = stride * t_count;
    let iv = |t: usize, k: usize| t * stride + k;
    let vv = |t: usize, k: usize| t * stride + n + k;
    let tv = |t: usize| t * stride + 2 * n;

    // torque coefficients −b̂'(θ) from the sampled torque surface: the g
    // surface of an affine model is linear in F, take its two-point slope
    let mut tau_coeff = vec![vec![0.0; m]; t_count]; // c_e(t)
    let mut tau_icept = vec![0.0; t_count];
    for e in 0..m {
        let g = derive_phase_torque(model, e)?;
        let (f0, f1) = (g.mmf_grid[0], g.mmf_grid[g.mmf_grid.len() - 1]);
        let surf_theta = &model.flux_char[e].theta_grid;
        for t in 0..t_count {
            let col = surf_theta
                .iter()
                .position(|&x| (x - grid.theta[t]).abs() <= 1e-9 * (1.0 + x.abs()))
                .ok_or(VerifyError::GridMismatch(t))?;
            let slope = (g.values[g.mmf_grid.len() - 1][col] - g.values[0][col]) / (f1 - f0);
            let icept = g.values[0][col] - slope * f0;
            tau_coeff[t][e] = slope;
            tau_icept[t] += icept;
        }
    }

    let w_over_d = omega / grid.delta;
    let mut eq = TripletBuilder::new(nv);
    let mut row: Vec<(usize, f64)> = Vec::new();
    for t in 0..t_count {
        // v_t = R i_t + ω(L i_{t+1} + k_{t+1} − L i_t − k_t)/Δ
        let (t_next, shifted) = if t + 1 < t_count {
            (t + 1, false)
        } else {
            (0, true)
        };
        for k in 0..n {
            row.clear();
            row.push((vv(t, k), 1.0));
            row.push((iv(t, k), -model.resistance[k]));
            let krow = if shifted { model.winding_shift[k] } else { k };
            for c in 0..n {
                row.push((iv(t_next, c), -w_over_d * red.inductance[(krow, c)]));
                row.push((iv(t, c), w_over_d * red.inductance[(k, c)]));
            }
            let k_next = red.back_emf[pwa_col(&red.theta_grid, grid.theta[t_next])][krow];
            let k_here = red.back_emf[pwa_col(&red.theta_grid, grid.theta[t])][k];
            eq.push_row(&row, w_over_d * (k_next - k_here));
        }
        // τ_t − Σ_e c_e(t)·(M⁻¹C i)_e = Σ_e d_e(t)
        row.clear();
        row.push((tv(t), 1.0));
        for k in 0..n {
            let mut coef = 0.0;
            for e in 0..m {
                coef += tau_coeff[t][e] * f_of_i[(e, k)];
            }
            row.push((iv(t, k), -coef));
        }
        eq.push_row(&row, tau_icept[t]);
    }
    row.clear();
    for t in 0..t_count {
        row.push((tv(t), 1.0 / t_count as f64));
    }
    eq.push_row(&row, tau_des);

    let mut lb = vec![f64::NEG_INFINITY; nv];
    let mut ub = vec![f64::INFINITY; nv];
    for t in 0..t_count {
        for k in 0..n {
            lb[vv(t, k)] = -model.v_max;
            ub[vv(t, k)] = model.v_max;
            if let Some(imax) = model.i_max {
                lb[iv(t, k)] = -imax;
                ub[iv(t, k)] = imax;
            }
        }
    }
    let weight = 1.0 / t_count as f64;
    let mut ptrips = Vec::new();
    let mut q = vec![0.0; nv];
    for t in 0..t_count {
        for k in 0..n {
            ptrips.push((iv(t, k), iv(t, k), 2.0 * model.resistance[k] * weight));
        }
        ptrips.push((tv(t), tv(t), 2.0 * alpha * weight));
        q[tv(t)] = -2.0 * alpha * tau_des * weight;
    }
    let direct_inst = QpInstance {
        n: nv,
        p: CscMatrix::from_triplets(nv, nv, &ptrips),
        q,
        c0: alpha * tau_des * tau_des,
        a_eq: eq.build(),
        b_eq: eq.rhs,
        a_in: CscMatrix::zeros(0, nv),
        b_in: vec![],
        lb,
        ub,
    };
    let direct = solve_qp(&direct_inst, 1e-10, 200_000);

    let gap = (micp.objective - direct.objective).abs() / direct.objective.abs().max(1.0);
    Ok(CrosscheckReport {
        micp_objective: micp.objective,
        direct_objective: direct.objective,
        relative_gap: gap,
    })
}

fn pwa_col(theta_grid: &[f64], theta: f64) -> usize {
    theta_grid
        .iter()
        .position(|&x| (x - theta).abs() <= 1e-9 * (1.0 + x.abs()))
        .expect("angle on the sampled grid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bnb::{solve, BnbConfig};
    use crate::model::{linspace, SampledSurface};
    use crate::transcribe::{transcribe, Grid, TranscribeOptions};

    /// B&B must reproduce exhaustive enumeration: the module's defining check.
    #[test]
    fn bnb_matches_enumeration_on_toy() {
        let prob = crate::bnb::tests::toy_problem(0.08, 2.0, false);
        let enumeration = enumerate_global(&prob, 1 << 16).unwrap();
        assert_eq!(enumeration.assignments_total, 16);
        let bnb = solve(
            &prob,
            &BnbConfig {
                gap_tol: 1e-8,
                perspective_on: false,
                ..BnbConfig::default()
            },
        );
        let obj_enum = enumeration.objective.expect("toy is feasible");
        let obj_bnb = bnb.upper_bound;
        assert!(
            (obj_bnb - obj_enum).abs() <= 1e-6 * obj_enum.abs().max(1.0),
            "bnb {obj_bnb} vs enumeration {obj_enum}"
        );
    }

    #[test]
    fn enumeration_infeasible_and_single_assignment_cases() {
        // torque far beyond reach with a tiny voltage budget
        let mut model = crate::bnb::tests::toy_model(1.0);
        model.v_max = 0.05;
        let pwa = crate::pwa::fit_model(&model, &model.breakpoints.clone()).unwrap();
        let grid = Grid::new(&model, 4);
        let prob = transcribe(&model, &pwa, &grid, 5.0, 50.0, 1.0, TranscribeOptions::default()).unwrap();
        let res = enumerate_global(&prob, 1 << 16).unwrap();
        assert!(res.objective.is_none());
        assert_eq!(res.feasible_count, 0);

        // N = 1: exactly one assignment, equal to the root relaxation
        let model = crate::bnb::tests::toy_model(1.0);
        let pwa1 = crate::pwa::fit_model(&model, &[0.0, 100.0]).unwrap();
        let prob1 = transcribe(&model, &pwa1, &grid, 5.0, 0.05, 1.0, TranscribeOptions::default()).unwrap();
        let res1 = enumerate_global(&prob1, 1 << 16).unwrap();
        assert_eq!(res1.assignments_total, 1);
        let root = solve_qp(&prob1.relaxation(&[]), 1e-9, 100_000);
        let obj = res1.objective.unwrap();
        assert!((obj - root.objective).abs() <= 1e-6 * root.objective.abs().max(1.0));

        // budget guard
        let big = crate::bnb::tests::toy_problem(0.08, 2.0, false);
        assert!(matches!(
            enumerate_global(&big, 8),
            Err(VerifyError::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn evaluate_zero_waveforms() {
        let prob = crate::bnb::tests::toy_problem(0.0, 0.0, false);
        let x = {
            let mut x = vec![0.0; prob.n_vars()];
            for t in 0..prob.layout.t_count {
                x[prob.layout.s(t, 0, 0)] = 1.0;
            }
            x
        };
        let sol = prob.assemble_waveforms(&x).unwrap();
        let rep = evaluate_waveforms(&prob.model, &prob.pwa, &sol, 0.0, 0.0, true).unwrap();
        assert_eq!(rep.p_loss, 0.0);
        assert_eq!(rep.v_peak, 0.0);
        assert!(rep.tau_avg.abs() < 1e-12);
    }

    #[test]
    fn evaluate_matches_solver_metrics_and_residual_envelope() {
        let prob = crate::bnb::tests::toy_problem(0.08, 2.0, false);
        let res = solve(
            &prob,
            &BnbConfig {
                gap_tol: 1e-7,
                perspective_on: false,
                ..BnbConfig::default()
            },
        );
        let inc = res.incumbent.expect("feasible toy");
        let rep = evaluate_waveforms(&prob.model, &prob.pwa, &inc, prob.alpha, prob.tau_des, true).unwrap();
        assert!((rep.tau_avg - inc.metrics.tau_avg).abs() <= 1e-6 * (1.0 + inc.metrics.tau_avg.abs()));
        assert!((rep.p_loss - inc.metrics.p_loss).abs() <= 1e-6 * (1.0 + inc.metrics.p_loss.abs()));
        assert!((rep.objective - inc.metrics.objective).abs() <= 1e-6 * (1.0 + inc.metrics.objective.abs()));

        // true-model re-evaluation: discrepancy bounded by the pointwise fit
        // deviation envelope
        let rep_true = evaluate_waveforms(&prob.model, &prob.pwa, &inc, prob.alpha, prob.tau_des, false).unwrap();
        let mut envelope = 0.0f64;
        for e in 0..prob.model.m_elements {
            let g = derive_phase_torque(&prob.model, e).unwrap();
            for (i, _) in g.mmf_grid.iter().enumerate() {
                for t in 0..g.theta_grid.len() {
                    let fitted = eval_g(&prob.pwa, e, t, g.mmf_grid[i]).unwrap();
                    envelope = envelope.max((fitted - g.values[i][t]).abs());
                }
            }
        }
        assert!(
            rep_true.pwa_vs_true_gap <= prob.model.m_elements as f64 * envelope + 1e-9,
            "gap {} envelope {}",
            rep_true.pwa_vs_true_gap,
            envelope
        );
    }

    fn affine_pm_model(slope: Vec<f64>, beta: Vec<f64>, resistance: Vec<f64>, v_max: f64) -> crate::model::MotorModel {
        let n = slope.len();
        let mmf = linspace(-200.0, 200.0, 21);
        let theta = linspace(0.0, 2.0 * std::f64::consts::PI, 9);
        let surfs = (0..n)
            .map(|e| {
                let values = mmf
                    .iter()
                    .map(|&f| {
                        theta
                            .iter()
                            .map(|&th| slope[e] * f + beta[e] * (th + e as f64).cos())
                            .collect()
                    })
                    .collect();
                SampledSurface {
                    mmf_grid: mmf.clone(),
                    theta_grid: theta.clone(),
                    values,
                }
            })
            .collect();
        let mesh = if n == 2 {
            nalgebra::DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0])
        } else {
            nalgebra::DMatrix::identity(n, n)
        };
        crate::model::MotorModel {
            name: "affine-pm".into(),
            n_windings: n,
            m_elements: n,
            l_meshes: n,
            resistance,
            mesh_matrix: mesh,
            geometry_matrix: nalgebra::DMatrix::from_diagonal_element(n, n, 12.0),
            v_max,
            i_max: None,
            pole_pairs: 1,
            phase_count: 1,
            winding_shift: (0..n).collect(),
            element_shift: (0..n).collect(),
            mesh_shift: (0..n).collect(),
            permanent_magnet: true,
            breakpoints: vec![-200.0, 200.0],
            flux_char: surfs,
        }
    }

    /// The §-level reduction claim: MICP path and direct convex QP agree.
    #[test]
    fn affine_crosscheck_agrees() {
        let model = affine_pm_model(vec![2e-3, 3e-3], vec![0.05, 0.04], vec![0.5, 0.6], 80.0);
        model.validate().unwrap();
        let rep = affine_crosscheck(&model, 8, 3.0, 0.4, 1.5).unwrap();
        assert!(
            rep.relative_gap <= 1e-6,
            "micp {} vs direct {} (gap {})",
            rep.micp_objective,
            rep.direct_objective,
            rep.relative_gap
        );
    }

    #[test]
    fn affine_crosscheck_zero_and_scaling_cases() {
        // k(θ) ≡ 0 (no magnet offsets), τ_des = 0, α = 0 → both zero
        let model = affine_pm_model(vec![2e-3, 3e-3], vec![0.0, 0.0], vec![0.5, 0.6], 80.0);
        let rep = affine_crosscheck(&model, 8, 3.0, 0.0, 0.0).unwrap();
        assert!(rep.micp_objective.abs() < 1e-9);
        assert!(rep.direct_objective.abs() < 1e-9);

        // scaled R: objectives scale identically (α = 0, slack voltage limit)
        let base = affine_pm_model(vec![2e-3, 3e-3], vec![0.05, 0.04], vec![0.5, 0.6], 1e6);
        let scaled = affine_pm_model(vec![2e-3, 3e-3], vec![0.05, 0.04], vec![3.5, 4.2], 1e6);
        let r1 = affine_crosscheck(&base, 8, 3.0, 0.4, 0.0).unwrap();
        let r7 = affine_crosscheck(&scaled, 8, 3.0, 0.4, 0.0).unwrap();
        let ratio_micp = r7.micp_objective / r1.micp_objective;
        let ratio_direct = r7.direct_objective / r1.direct_objective;
        assert!((ratio_micp - 7.0).abs() <= 1e-9 * 7.0, "micp ratio {ratio_micp}");
        assert!((ratio_direct - 7.0).abs() <= 1e-9 * 7.0, "direct ratio {ratio_direct}");
    }

    #[test]
    fn glue_residual_on_incumbent() {
        let prob = crate::bnb::tests::toy_problem(0.08, 2.0, false);
        let res = solve(
            &prob,
            &BnbConfig {
                gap_tol: 1e-7,
                perspective_on: false,
                ..BnbConfig::default()
            },
        );
        let inc = res.incumbent.unwrap();
        assert!(glue_residual(&prob.model, &inc, prob.omega) <= 1e-6);
    }
}
