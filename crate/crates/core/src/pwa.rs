//! Continuous piecewise-affine approximation of the flux and torque
//! characteristics over fixed MMF breakpoints, one fit per grid angle.
//!
//! The fit is an equality-constrained least-squares problem: minimize the
//! squared residual against the samples subject to continuity at every
//! interior breakpoint. Internally the continuity constraints are eliminated
//! by writing the function in the hat (linear spline) basis, which spans
//! exactly the continuous piecewise-affine class over the given breakpoints.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{derive_phase_torque, MotorModel, SampledSurface};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("breakpoints invalid: {0}")]
    Breakpoints(String),
    #[error("element {element}: region {region} has no samples")]
    EmptyRegion { element: usize, region: usize },
    #[error("element {element}: fitted flux slope ≤ 0 in region {region} at θ index {theta_index}")]
    NonMonotoneFluxSlope {
        element: usize,
        region: usize,
        theta_index: usize,
    },
    #[error("element {element}: MMF sample {value} outside breakpoint range")]
    SampleOutOfRange { element: usize, value: f64 },
    #[error("flux and torque surfaces must share grids")]
    GridMismatch,
    #[error("least-squares system is singular")]
    Singular,
    #[error("F = {value} outside the PWA domain [{lo}, {hi}]")]
    Domain { value: f64, lo: f64, hi: f64 },
}

/// Piecewise-affine coefficients for one element: `a[t][j]`, `b[t][j]` for the
/// flux pieces and `c[t][j]`, `d[t][j]` for the torque pieces, region j at
/// grid angle index t.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ElementPwa {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
    /// Sum of squared flux residuals per grid angle.
    pub residual_f: Vec<f64>,
    /// Sum of squared torque residuals per grid angle.
    pub residual_g: Vec<f64>,
}

/// Piecewise-affine characteristics of the whole motor over shared breakpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PwaCharacteristic {
    pub breakpoints: Vec<f64>,
    pub theta_grid: Vec<f64>,
    pub elements: Vec<ElementPwa>,
    /// Max deviation between the fitted torque PWA and the torque implied by
    /// differentiating the fitted flux PWA. Diagnostic only.
    pub gtilde_mismatch: f64,
}

impl PwaCharacteristic {
    pub fn n_regions(&self) -> usize {
        self.breakpoints.len() - 1
    }

    pub fn m_elements(&self) -> usize {
        self.elements.len()
    }

    /// Index of the grid angle equal to `theta`, if present (1e-9 tolerance).
    pub fn theta_index(&self, theta: f64) -> Option<usize> {
        self.theta_grid
            .iter()
            .position(|&t| (t - theta).abs() <= 1e-9 * (1.0 + theta.abs()))
    }
}

fn region_of(breakpoints: &[f64], f: f64) -> Option<usize> {
    let n = breakpoints.len() - 1;
    let tol = 1e-6 * (breakpoints[n] - breakpoints[0]).abs();
    if f < breakpoints[0] - tol || f > breakpoints[n] + tol {
        return None;
    }
    let fc = f.clamp(breakpoints[0], breakpoints[n]);
    let pos = breakpoints.partition_point(|&b| b <= fc);
    Some(pos.clamp(1, n) - 1) // 0-based region
}

/// Fit continuous PWA flux and torque functions for one element.
///
/// Both surfaces must share their grids; the breakpoints must be ascending and
/// span the sampled MMF range; every region must contain at least one sample.
pub fn fit(
    surface_f: &SampledSurface,
    surface_g: &SampledSurface,
    breakpoints: &[f64],
) -> Result<ElementPwa, FitError> {
    fit_indexed(surface_f, surface_g, breakpoints, 0)
}

fn fit_indexed(
    surface_f: &SampledSurface,
    surface_g: &SampledSurface,
    breakpoints: &[f64],
    element: usize,
) -> Result<ElementPwa, FitError> {
    if breakpoints.len() < 2 {
        return Err(FitError::Breakpoints("need at least 2 breakpoints".into()));
    }
    for w in breakpoints.windows(2) {
        if w[1] <= w[0] {
            return Err(FitError::Breakpoints("must be strictly ascending".into()));
        }
    }
    if surface_f.mmf_grid != surface_g.mmf_grid || surface_f.theta_grid != surface_g.theta_grid {
        return Err(FitError::GridMismatch);
    }
    let n = breakpoints.len() - 1;
    let samples = &surface_f.mmf_grid;
    let mut region_count = vec![0usize; n];
    let mut regions = Vec::with_capacity(samples.len());
    for &f in samples {
        let j = region_of(breakpoints, f).ok_or(FitError::SampleOutOfRange { element, value: f })?;
        region_count[j] += 1;
        regions.push(j);
    }
    if let Some(j) = region_count.iter().position(|&c| c == 0) {
        return Err(FitError::EmptyRegion { element, region: j });
    }

    // hat-basis design matrix, shared by every θ column
    let s = samples.len();
    let mut design = DMatrix::zeros(s, n + 1);
    for (i, (&f, &j)) in samples.iter().zip(&regions).enumerate() {
        let w = (f - breakpoints[j]) / (breakpoints[j + 1] - breakpoints[j]);
        design[(i, j)] = 1.0 - w;
        design[(i, j + 1)] = w;
    }
    let lsq = design.clone().svd(true, true);

    let n_th = surface_f.n_theta();
    let mut out = ElementPwa {
        a: vec![vec![0.0; n]; n_th],
        b: vec![vec![0.0; n]; n_th],
        c: vec![vec![0.0; n]; n_th],
        d: vec![vec![0.0; n]; n_th],
        residual_f: vec![0.0; n_th],
        residual_g: vec![0.0; n_th],
    };
    for t in 0..n_th {
        for (which, surf) in [(0usize, surface_f), (1, surface_g)] {
            let y = DVector::from_iterator(s, (0..s).map(|i| surf.values[i][t]));
            let v = lsq.solve(&y, 1e-13).map_err(|_| FitError::Singular)?;
            let mut ssr = 0.0;
            for i in 0..s {
                let j = regions[i];
                let w = (samples[i] - breakpoints[j]) / (breakpoints[j + 1] - breakpoints[j]);
                let pred = v[j] * (1.0 - w) + v[j + 1] * w;
                ssr += (surf.values[i][t] - pred).powi(2);
            }
            for j in 0..n {
                let slope = (v[j + 1] - v[j]) / (breakpoints[j + 1] - breakpoints[j]);
                let icept = v[j] - slope * breakpoints[j];
                if which == 0 {
                    if slope <= 0.0 {
                        return Err(FitError::NonMonotoneFluxSlope {
                            element,
                            region: j,
                            theta_index: t,
                        });
                    }
                    out.a[t][j] = slope;
                    out.b[t][j] = icept;
                } else {
                    out.c[t][j] = slope;
                    out.d[t][j] = icept;
                }
            }
            if which == 0 {
                out.residual_f[t] = ssr;
            } else {
                out.residual_g[t] = ssr;
            }
        }
    }
    Ok(out)
}

/// Derive the torque surfaces and fit every element of a model.
pub fn fit_model(model: &MotorModel, breakpoints: &[f64]) -> Result<PwaCharacteristic, FitError> {
    let mut elements = Vec::with_capacity(model.m_elements);
    let mut torque_surfaces = Vec::with_capacity(model.m_elements);
    for k in 0..model.m_elements {
        let g = derive_phase_torque(model, k)
            .map_err(|e| FitError::Breakpoints(format!("torque derivation failed: {e}")))?;
        let fit_k = fit_indexed(&model.flux_char[k], &g, breakpoints, k)?;
        elements.push(fit_k);
        torque_surfaces.push(g);
    }
    let mut pwa = PwaCharacteristic {
        breakpoints: breakpoints.to_vec(),
        theta_grid: model.flux_char[0].theta_grid.clone(),
        elements,
        gtilde_mismatch: 0.0,
    };
    pwa.gtilde_mismatch = gtilde_mismatch(model, &pwa);
    Ok(pwa)
}

/// Torque implied by the *fitted flux* (co-energy of f̃, θ-difference as in the
/// sampled derivation) versus the independently fitted g̃. Diagnostic.
fn gtilde_mismatch(model: &MotorModel, pwa: &PwaCharacteristic) -> f64 {
    let mut shadow = model.clone();
    for k in 0..model.m_elements {
        let surf = &model.flux_char[k];
        let values = surf
            .mmf_grid
            .iter()
            .map(|&f| {
                (0..surf.n_theta())
                    .map(|t| eval_f(pwa, k, t, f).unwrap_or(0.0))
                    .collect()
            })
            .collect();
        shadow.flux_char[k].values = values;
    }
    let mut worst = 0.0f64;
    for k in 0..model.m_elements {
        let Ok(g_implied) = derive_phase_torque(&shadow, k) else {
            return f64::NAN;
        };
        let surf = &model.flux_char[k];
        for (i, &f) in surf.mmf_grid.iter().enumerate() {
            for t in 0..surf.n_theta() {
                if let Ok(gt) = eval_g(pwa, k, t, f) {
                    worst = worst.max((gt - g_implied.values[i][t]).abs());
                }
            }
        }
    }
    worst
}

/// Fitted flux value f̃_k(F, θ_t), weber.
pub fn eval_f(pwa: &PwaCharacteristic, k: usize, t: usize, f: f64) -> Result<f64, FitError> {
    let bp = &pwa.breakpoints;
    let j = region_of(bp, f).ok_or(FitError::Domain {
        value: f,
        lo: bp[0],
        hi: bp[bp.len() - 1],
    })?;
    let e = &pwa.elements[k];
    Ok(e.a[t][j] * f + e.b[t][j])
}

/// Fitted torque value g̃_k(F, θ_t), newton-meter.
pub fn eval_g(pwa: &PwaCharacteristic, k: usize, t: usize, f: f64) -> Result<f64, FitError> {
    let bp = &pwa.breakpoints;
    let j = region_of(bp, f).ok_or(FitError::Domain {
        value: f,
        lo: bp[0],
        hi: bp[bp.len() - 1],
    })?;
    let e = &pwa.elements[k];
    Ok(e.c[t][j] * f + e.d[t][j])
}

/// CSV dump of the fitted curves, one block of rows per grid angle:
/// `theta_rad, F_at, f_wb, g_nm` with `samples` points per region.
pub fn export_curves(pwa: &PwaCharacteristic, element: usize, samples_per_region: usize) -> String {
    let mut out = String::from("# reluct-pwa-curves v1\ntheta_rad,F_at,f_wb,g_nm\n");
    let n = pwa.n_regions();
    for (t, &theta) in pwa.theta_grid.iter().enumerate() {
        for j in 0..n {
            for q in 0..samples_per_region {
                let w = q as f64 / samples_per_region as f64;
                let f = pwa.breakpoints[j] * (1.0 - w) + pwa.breakpoints[j + 1] * w;
                let fv = eval_f(pwa, element, t, f).unwrap();
                let gv = eval_g(pwa, element, t, f).unwrap();
                out.push_str(&format!("{theta},{f},{fv},{gv}\n"));
            }
        }
        let f = pwa.breakpoints[n];
        let fv = eval_f(pwa, element, t, f).unwrap();
        let gv = eval_g(pwa, element, t, f).unwrap();
        out.push_str(&format!("{theta},{f},{fv},{gv}\n"));
    }
    out
}

/// Serializable PWA block for embedding in the model JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PwaJson {
    pub breakpoints_at: Vec<f64>,
    pub theta_grid_rad: Vec<f64>,
    pub elements: Vec<ElementPwa>,
    pub gtilde_mismatch: f64,
}

impl PwaJson {
    pub fn from_pwa(pwa: &PwaCharacteristic) -> Self {
        PwaJson {
            breakpoints_at: pwa.breakpoints.clone(),
            theta_grid_rad: pwa.theta_grid.clone(),
            elements: pwa.elements.clone(),
            gtilde_mismatch: pwa.gtilde_mismatch,
        }
    }

    pub fn into_pwa(self) -> PwaCharacteristic {
        PwaCharacteristic {
            breakpoints: self.breakpoints_at,
            theta_grid: self.theta_grid_rad,
            elements: self.elements,
            gtilde_mismatch: self.gtilde_mismatch,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{example_motor_sampled, linspace};

    fn surface_from_fn(
        mmf: Vec<f64>,
        theta: Vec<f64>,
        f: impl Fn(f64, f64) -> f64,
    ) -> SampledSurface {
        let values = mmf
            .iter()
            .map(|&x| theta.iter().map(|&t| f(x, t)).collect())
            .collect();
        SampledSurface {
            mmf_grid: mmf,
            theta_grid: theta,
            values,
        }
    }

    #[test]
    fn exact_pwa_data_is_recovered() {
        // piecewise affine with knots at the fit breakpoints: interpolation of
        // the model class, so the fit must reproduce it to machine precision
        let bp = vec![0.0, 1.0, 3.0];
        let truth = |x: f64| if x <= 1.0 { 2.0 * x } else { 2.0 + 0.5 * (x - 1.0) };
        let mmf = linspace(0.0, 3.0, 31);
        let theta = linspace(0.0, 1.0, 3);
        let sf = surface_from_fn(mmf.clone(), theta.clone(), |x, _| truth(x));
        let sg = surface_from_fn(mmf, theta, |x, _| 0.1 * x);
        let e = fit(&sf, &sg, &bp).unwrap();
        for t in 0..3 {
            assert!((e.a[t][0] - 2.0).abs() < 1e-12);
            assert!((e.a[t][1] - 0.5).abs() < 1e-12);
            assert!(e.b[t][0].abs() < 1e-12);
            assert!((e.b[t][1] - 1.5).abs() < 1e-12);
            assert!(e.residual_f[t] < 1e-20);
            assert!((e.c[t][0] - 0.1).abs() < 1e-12);
            assert!(e.d[t][0].abs() < 1e-12);
        }
    }

    #[test]
    fn affine_samples_single_region() {
        let bp = vec![0.0, 5000.0];
        let mmf = linspace(0.0, 5000.0, 11);
        let theta = vec![0.0, 0.5];
        let sf = surface_from_fn(mmf.clone(), theta.clone(), |x, _| 2e-4 * x);
        let sg = surface_from_fn(mmf, theta, |_, _| 0.0);
        let e = fit(&sf, &sg, &bp).unwrap();
        assert!((e.a[0][0] - 2e-4).abs() < 1e-16);
        assert!(e.b[0][0].abs() < 1e-12);
    }

    /// Independent oracle: normal equations in (a_j, b_j) with Lagrange
    /// multipliers for the interior continuity constraints, solved densely.
    fn constrained_lsq_oracle(samples: &[f64], y: &[f64], bp: &[f64]) -> f64 {
        let n = bp.len() - 1;
        let nv = 2 * n;
        let nc = n - 1;
        let mut ee: DMatrix<f64> = DMatrix::zeros(nv, nv);
        let mut ey: DVector<f64> = DVector::zeros(nv);
        for (i, &f) in samples.iter().enumerate() {
            let j = super::region_of(bp, f).unwrap();
            let (ca, cb) = (2 * j, 2 * j + 1);
            ee[(ca, ca)] += f * f;
            ee[(ca, cb)] += f;
            ee[(cb, ca)] += f;
            ee[(cb, cb)] += 1.0;
            ey[ca] += f * y[i];
            ey[cb] += y[i];
        }
        let mut kkt: DMatrix<f64> = DMatrix::zeros(nv + nc, nv + nc);
        let mut rhs: DVector<f64> = DVector::zeros(nv + nc);
        for r in 0..nv {
            for c in 0..nv {
                kkt[(r, c)] = 2.0 * ee[(r, c)];
            }
            rhs[r] = 2.0 * ey[r];
        }
        for q in 0..nc {
            let bpq = bp[q + 1];
            let row = nv + q;
            for (col, val) in [
                (2 * q, bpq),
                (2 * q + 1, 1.0),
                (2 * (q + 1), -bpq),
                (2 * (q + 1) + 1, -1.0),
            ] {
                kkt[(row, col)] = val;
                kkt[(col, row)] = val;
            }
        }
        let sol = kkt.lu().solve(&rhs).expect("kkt solvable");
        let mut ssr = 0.0;
        for (i, &f) in samples.iter().enumerate() {
            let j = super::region_of(bp, f).unwrap();
            let pred = sol[2 * j] * f + sol[2 * j + 1];
            ssr += (y[i] - pred).powi(2);
        }
        ssr
    }

    #[test]
    fn synthetic_surface_residual_matches_kkt_oracle() {
        let model = example_motor_sampled(121, 9);
        let bp = model.breakpoints.clone();
        let pwa = fit_model(&model, &bp).unwrap();
        let g0 = derive_phase_torque(&model, 0).unwrap();
        for t in [0usize, 4, 8] {
            let yf: Vec<f64> = (0..model.flux_char[0].n_mmf())
                .map(|i| model.flux_char[0].values[i][t])
                .collect();
            let oracle_f = constrained_lsq_oracle(&model.flux_char[0].mmf_grid, &yf, &bp);
            let got_f = pwa.elements[0].residual_f[t];
            assert!(
                (got_f - oracle_f).abs() <= 1e-8 * oracle_f.max(1.0),
                "flux SSR {got_f} vs oracle {oracle_f}"
            );
            let yg: Vec<f64> = (0..g0.n_mmf()).map(|i| g0.values[i][t]).collect();
            let oracle_g = constrained_lsq_oracle(&g0.mmf_grid, &yg, &bp);
            let got_g = pwa.elements[0].residual_g[t];
            assert!(
                (got_g - oracle_g).abs() <= 1e-8 * oracle_g.max(1.0),
                "torque SSR {got_g} vs oracle {oracle_g}"
            );
        }
    }

    #[test]
    fn empty_region_and_nonmonotone_rejected() {
        let mmf = vec![0.0, 10.0];
        let theta = vec![0.0, 1.0];
        let sf = surface_from_fn(mmf.clone(), theta.clone(), |x, _| 1e-3 * x);
        let sg = surface_from_fn(mmf.clone(), theta.clone(), |_, _| 0.0);
        match fit(&sf, &sg, &[0.0, 4.0, 6.0, 10.0]) {
            Err(FitError::EmptyRegion { region: 1, .. }) => {}
            other => panic!("expected EmptyRegion, got {other:?}"),
        }
        // decreasing data → flux slope ≤ 0
        let mmf2 = linspace(0.0, 10.0, 5);
        let sf2 = surface_from_fn(mmf2.clone(), theta.clone(), |x, _| -1e-3 * x);
        let sg2 = surface_from_fn(mmf2, theta, |_, _| 0.0);
        match fit(&sf2, &sg2, &[0.0, 10.0]) {
            Err(FitError::NonMonotoneFluxSlope { region: 0, .. }) => {}
            other => panic!("expected NonMonotoneFluxSlope, got {other:?}"),
        }
    }

    #[test]
    fn eval_continuity_and_scan_oracle() {
        let model = example_motor_sampled(121, 9);
        let pwa = fit_model(&model, &model.breakpoints).unwrap();
        // origin: a PWA with b¹ = 0 evaluates to 0 at F = 0
        let mmf = linspace(0.0, 6000.0, 13);
        let theta = model.flux_char[0].theta_grid.clone();
        let sf = surface_from_fn(mmf.clone(), theta.clone(), |x, _| 3e-6 * x);
        let sg = surface_from_fn(mmf, theta.clone(), |_, _| 0.0);
        let exact = fit(&sf, &sg, &model.breakpoints).unwrap();
        let origin = PwaCharacteristic {
            breakpoints: model.breakpoints.clone(),
            theta_grid: theta,
            elements: vec![exact],
            gtilde_mismatch: 0.0,
        };
        assert!(eval_f(&origin, 0, 0, 0.0).unwrap().abs() < 1e-15);
        // interior breakpoints: left and right pieces agree
        for t in 0..pwa.theta_grid.len() {
            for j in 1..pwa.n_regions() {
                let bp = pwa.breakpoints[j];
                let e = &pwa.elements[0];
                let left = e.a[t][j - 1] * bp + e.b[t][j - 1];
                let right = e.a[t][j] * bp + e.b[t][j];
                let scale = left.abs().max(right.abs()).max(1e-30);
                assert!((left - right).abs() <= 1e-12 * scale.max(1.0));
            }
        }
        // random F against a linear-scan region lookup
        let mut state = 0x9e3779b97f4a7c15u64;
        for _ in 0..200 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let u = (state >> 11) as f64 / (1u64 << 53) as f64;
            let f = 6000.0 * u;
            let mut j_scan = pwa.n_regions() - 1;
            for j in 0..pwa.n_regions() {
                if f >= pwa.breakpoints[j] && f < pwa.breakpoints[j + 1] {
                    j_scan = j;
                    break;
                }
            }
            let e = &pwa.elements[1];
            let direct = e.a[3][j_scan] * f + e.b[3][j_scan];
            assert_eq!(eval_f(&pwa, 1, 3, f).unwrap(), direct);
        }
        // outside the domain
        assert!(matches!(
            eval_f(&pwa, 0, 0, 6600.0),
            Err(FitError::Domain { .. })
        ));
    }

    #[test]
    fn fit_is_idempotent_and_never_worse_than_single_affine() {
        let model = example_motor_sampled(121, 5);
        let bp = model.breakpoints.clone();
        let pwa = fit_model(&model, &bp).unwrap();
        // refit on the fitted function's own samples: residual ~ 0, same coeffs
        let surf = &model.flux_char[0];
        let mut fs = surf.clone();
        let mut gs = surf.clone();
        for i in 0..surf.n_mmf() {
            for t in 0..surf.n_theta() {
                fs.values[i][t] = eval_f(&pwa, 0, t, surf.mmf_grid[i]).unwrap();
                gs.values[i][t] = eval_g(&pwa, 0, t, surf.mmf_grid[i]).unwrap();
            }
        }
        let e2 = fit(&fs, &gs, &bp).unwrap();
        for t in 0..surf.n_theta() {
            assert!(e2.residual_f[t] < 1e-10);
            assert!(e2.residual_g[t] < 1e-10);
            for j in 0..pwa.n_regions() {
                assert!((e2.a[t][j] - pwa.elements[0].a[t][j]).abs() < 1e-10 * pwa.elements[0].a[t][j].abs());
            }
        }
        // more regions never hurt: compare with the best single affine fit
        let single = fit(&model.flux_char[0], &model.flux_char[0], &[0.0, 6000.0]).unwrap();
        for t in 0..surf.n_theta() {
            assert!(pwa.elements[0].residual_f[t] <= single.residual_f[t] + 1e-12);
        }
    }

    #[test]
    fn monotone_on_dense_probe() {
        let model = example_motor_sampled(121, 9);
        let pwa = fit_model(&model, &model.breakpoints).unwrap();
        for k in 0..3 {
            for t in 0..pwa.theta_grid.len() {
                let mut prev = f64::NEG_INFINITY;
                for q in 0..=600 {
                    let f = 6000.0 * q as f64 / 600.0;
                    let v = eval_f(&pwa, k, t, f).unwrap();
                    assert!(v >= prev - 1e-15);
                    prev = v;
                }
            }
        }
    }
}
