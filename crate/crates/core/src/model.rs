//! Physical motor description: electrical circuit, magnetic circuit, sampled
//! magnetic characteristics, and the quantities derived from them.
//!
//! Conventions: angles are mechanical radians, MMF in ampere-turns, flux in
//! webers, torque in newton-meters. Rotational speed enters this layer in
//! rad/s only; rpm conversion happens at the CLI boundary.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pwa::PwaJson;

pub const MODEL_SCHEMA: &str = "reluct-model-v1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model at {path}: {msg}")]
    Invalid { path: String, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("theta grid of element {element} is not uniform")]
    NonUniformTheta { element: usize },
    #[error("element {element}: need at least 3 theta samples, got {got}")]
    TooFewThetaSamples { element: usize, got: usize },
    #[error("element {element} characteristic is not affine in MMF: {msg}")]
    NotAffine { element: usize, msg: String },
}

fn invalid(path: impl Into<String>, msg: impl Into<String>) -> ModelError {
    ModelError::Invalid {
        path: path.into(),
        msg: msg.into(),
    }
}

/// One magnetic characteristic sampled on a rectangular (MMF, θ) grid.
///
/// `values[i][t]` is the sample at `(mmf_grid[i], theta_grid[t])`. The θ grid
/// covers one reduced period `[0, 2π/(K·N_p)]` inclusive of both endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledSurface {
    pub mmf_grid: Vec<f64>,
    pub theta_grid: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl SampledSurface {
    pub fn n_mmf(&self) -> usize {
        self.mmf_grid.len()
    }

    pub fn n_theta(&self) -> usize {
        self.theta_grid.len()
    }

    /// Uniform θ spacing, or None if the grid is not uniform to 1e-9 relative.
    pub fn theta_step(&self) -> Option<f64> {
        if self.theta_grid.len() < 2 {
            return None;
        }
        let h = self.theta_grid[1] - self.theta_grid[0];
        for w in self.theta_grid.windows(2) {
            if ((w[1] - w[0]) - h).abs() > 1e-9 * h.abs().max(1e-30) {
                return None;
            }
        }
        Some(h)
    }

    /// Value at (F, θ_t) for the t-th grid angle, linear interpolation in F.
    pub fn interp_mmf(&self, f: f64, t: usize) -> f64 {
        let g = &self.mmf_grid;
        let n = g.len();
        assert!(n >= 2);
        let i = match g.binary_search_by(|x| x.partial_cmp(&f).unwrap()) {
            Ok(i) => i.min(n - 2),
            Err(0) => 0,
            Err(i) => (i - 1).min(n - 2),
        };
        let w = (f - g[i]) / (g[i + 1] - g[i]);
        self.values[i][t] * (1.0 - w) + self.values[i + 1][t] * w
    }

    fn check_grids(&self, path: &str) -> Result<(), ModelError> {
        if self.mmf_grid.len() < 2 {
            return Err(invalid(format!("{path}.mmf_grid_at"), "needs at least 2 samples"));
        }
        for (i, w) in self.mmf_grid.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(invalid(
                    format!("{path}.mmf_grid_at[{}]", i + 1),
                    "grid not strictly ascending",
                ));
            }
        }
        for (i, w) in self.theta_grid.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(invalid(
                    format!("{path}.theta_grid_rad[{}]", i + 1),
                    "grid not strictly ascending",
                ));
            }
        }
        if self.values.len() != self.mmf_grid.len() {
            return Err(invalid(
                format!("{path}.values"),
                format!(
                    "row count {} does not match mmf grid length {}",
                    self.values.len(),
                    self.mmf_grid.len()
                ),
            ));
        }
        for (i, row) in self.values.iter().enumerate() {
            if row.len() != self.theta_grid.len() {
                return Err(invalid(
                    format!("{path}.values[{i}]"),
                    format!(
                        "column count {} does not match theta grid length {}",
                        row.len(),
                        self.theta_grid.len()
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Lumped-parameter motor description. Immutable after construction; the
/// single source of physical truth for every downstream module.
#[derive(Debug, Clone)]
pub struct MotorModel {
    pub name: String,
    pub n_windings: usize,
    pub m_elements: usize,
    pub l_meshes: usize,
    /// Diagonal of the winding resistance matrix R, ohm.
    pub resistance: Vec<f64>,
    /// Mesh matrix M (l × m), entries in {−1, 0, 1}.
    pub mesh_matrix: DMatrix<f64>,
    /// Electro-magnetic geometry matrix C (l × n), turns.
    pub geometry_matrix: DMatrix<f64>,
    pub v_max: f64,
    pub i_max: Option<f64>,
    pub pole_pairs: usize,
    pub phase_count: usize,
    /// Winding index permutation σ realizing x_k(θ_T) = x_{σ(k)}(θ_0).
    pub winding_shift: Vec<usize>,
    /// Element index permutation for F and ψ at the reduced-period boundary.
    pub element_shift: Vec<usize>,
    /// Mesh index permutation for φ at the reduced-period boundary.
    pub mesh_shift: Vec<usize>,
    /// When true the characteristic may have nonzero flux at F = 0 and the
    /// MMF grid may span negative values (affine/permanent-magnet studies).
    pub permanent_magnet: bool,
    /// Default PWA breakpoints, ampere-turns.
    pub breakpoints: Vec<f64>,
    /// Flux characteristic f_k per element, weber over (ampere-turn, rad).
    pub flux_char: Vec<SampledSurface>,
}

impl MotorModel {
    /// Reduced-domain length 2π/(K·N_p).
    pub fn reduced_span(&self) -> f64 {
        2.0 * std::f64::consts::PI / (self.phase_count as f64 * self.pole_pairs as f64)
    }

    /// Full pole period 2π/N_p.
    pub fn pole_period(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.pole_pairs as f64
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let (n, m, l) = (self.n_windings, self.m_elements, self.l_meshes);
        if self.resistance.len() != n {
            return Err(invalid("resistance_ohm", "length must equal n_windings"));
        }
        for (k, &r) in self.resistance.iter().enumerate() {
            if !(r > 0.0) {
                return Err(invalid(
                    format!("resistance_ohm[{k}]"),
                    "diagonal resistance must be strictly positive",
                ));
            }
        }
        if self.mesh_matrix.nrows() != l || self.mesh_matrix.ncols() != m {
            return Err(invalid("mesh_matrix", format!("must be {l}×{m}")));
        }
        for (idx, &v) in self.mesh_matrix.iter().enumerate() {
            if v != 0.0 && v != 1.0 && v != -1.0 {
                return Err(invalid(
                    format!("mesh_matrix (entry {idx})"),
                    "entries must be in {-1, 0, 1}",
                ));
            }
        }
        if self.geometry_matrix.nrows() != l || self.geometry_matrix.ncols() != n {
            return Err(invalid("geometry_matrix_turns", format!("must be {l}×{n}")));
        }
        let rank_m = self.mesh_matrix.clone().svd(false, false).rank(1e-9);
        if rank_m < l {
            return Err(invalid("mesh_matrix", "must have full row rank"));
        }
        let rank_c = self.geometry_matrix.clone().svd(false, false).rank(1e-9);
        if rank_c < n {
            return Err(invalid("geometry_matrix_turns", "must have full column rank"));
        }
        if !(self.v_max > 0.0) {
            return Err(invalid("v_max_volt", "must be positive"));
        }
        if let Some(im) = self.i_max {
            if !(im > 0.0) {
                return Err(invalid("i_max_amp", "must be positive when present"));
            }
        }
        if self.pole_pairs == 0 || self.phase_count == 0 {
            return Err(invalid("pole_pairs/phase_count", "must be at least 1"));
        }
        for (name, perm, len) in [
            ("winding_shift", &self.winding_shift, n),
            ("element_shift", &self.element_shift, m),
            ("mesh_shift", &self.mesh_shift, l),
        ] {
            if perm.len() != len {
                return Err(invalid(name, format!("must have length {len}")));
            }
            let mut seen = vec![false; len];
            for &p in perm {
                if p >= len || seen[p] {
                    return Err(invalid(name, "must be a permutation"));
                }
                seen[p] = true;
            }
        }
        if self.breakpoints.len() < 2 {
            return Err(invalid("breakpoints_at", "need at least 2 breakpoints"));
        }
        for w in self.breakpoints.windows(2) {
            if w[1] <= w[0] {
                return Err(invalid("breakpoints_at", "must be strictly ascending"));
            }
        }
        if self.flux_char.len() != m {
            return Err(invalid("flux_surfaces", format!("need one surface per element ({m})")));
        }

        let span = self.reduced_span();
        let s0 = &self.flux_char[0];
        for (k, surf) in self.flux_char.iter().enumerate() {
            let path = format!("flux_surfaces[{k}]");
            surf.check_grids(&path)?;
            if surf.mmf_grid != s0.mmf_grid || surf.theta_grid != s0.theta_grid {
                return Err(invalid(path, "all surfaces must share the same grids"));
            }
            let th = &surf.theta_grid;
            if th.len() < 2 || th[0].abs() > 1e-9 || (th[th.len() - 1] - span).abs() > 1e-9 * span {
                return Err(invalid(
                    format!("{path}.theta_grid_rad"),
                    format!("must span [0, {span:.9}] (= 2π/(K·N_p))"),
                ));
            }
            if surf.theta_step().is_none() {
                return Err(ModelError::NonUniformTheta { element: k });
            }
            let scale = surf
                .values
                .iter()
                .flat_map(|r| r.iter())
                .fold(0.0f64, |a, &b| a.max(b.abs()))
                .max(1e-30);
            // monotonicity audit along the MMF axis
            for t in 0..surf.n_theta() {
                for i in 1..surf.n_mmf() {
                    if surf.values[i][t] <= surf.values[i - 1][t] {
                        return Err(invalid(
                            format!("{path}.values[{i}][{t}]"),
                            "characteristic must strictly increase along the MMF axis",
                        ));
                    }
                }
            }
            if !self.permanent_magnet {
                if surf.mmf_grid[0].abs() > 1e-12 {
                    return Err(invalid(
                        format!("{path}.mmf_grid_at[0]"),
                        "MMF grid must start at 0 unless permanent_magnet is set",
                    ));
                }
                for t in 0..surf.n_theta() {
                    if surf.values[0][t].abs() > 1e-9 * scale {
                        return Err(invalid(
                            format!("{path}.values[0][{t}]"),
                            "flux at F = 0 must vanish unless permanent_magnet is set",
                        ));
                    }
                }
            }
        }
        // periodicity audit: f_k(·, θ_T) must equal f_{σ(k)}(·, 0)
        for (k, surf) in self.flux_char.iter().enumerate() {
            let other = &self.flux_char[self.element_shift[k]];
            let last = surf.n_theta() - 1;
            let scale = surf
                .values
                .iter()
                .flat_map(|r| r.iter())
                .fold(0.0f64, |a, &b| a.max(b.abs()))
                .max(1e-30);
            for i in 0..surf.n_mmf() {
                if (surf.values[i][last] - other.values[i][0]).abs() > 1e-6 * scale {
                    return Err(invalid(
                        format!("flux_surfaces[{k}].values[{i}][{last}]"),
                        format!(
                            "phase-shift periodicity violated: f_{k}(θ_T) must equal f_{}(0)",
                            self.element_shift[k]
                        ),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Stable 64-bit hash of the serialized model (FNV-1a over canonical JSON).
    pub fn content_hash(&self) -> u64 {
        let file = ModelFile::from_model(self, None);
        let bytes = serde_json::to_vec(&file).expect("model serialization");
        fnv1a(&bytes)
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

// ---------------------------------------------------------------------------
// phase torque derivation
// ---------------------------------------------------------------------------

/// Derive the phase-torque surface g_k(y, θ) = −∂/∂θ ∫₀^y f_k(x, θ) dx for one
/// element, on the same grid as the flux surface.
///
/// The inner integral uses the trapezoid rule on the MMF grid. The θ-derivative
/// is a central difference over the full pole period: the reduced-domain
/// columns of all K phase-shifted elements are chained with the element
/// permutation, so the wrap is periodic with period 2π/N_p.
pub fn derive_phase_torque(model: &MotorModel, element: usize) -> Result<SampledSurface, ModelError> {
    let surf = &model.flux_char[element];
    let n_th = surf.n_theta();
    if n_th < 3 {
        return Err(ModelError::TooFewThetaSamples {
            element,
            got: n_th,
        });
    }
    let dtheta = surf
        .theta_step()
        .ok_or(ModelError::NonUniformTheta { element })?;
    let n_mmf = surf.n_mmf();
    let t_cols = n_th - 1; // distinct columns per reduced segment
    let k_phases = model.phase_count;
    let total = k_phases * t_cols;

    // co-energy E[i][p] over the unfolded full pole period
    let mut coenergy = vec![vec![0.0; total]; n_mmf];
    let mut elem = element;
    for seg in 0..k_phases {
        let fsurf = &model.flux_char[elem];
        for t in 0..t_cols {
            let p = seg * t_cols + t;
            let mut acc = 0.0;
            coenergy[0][p] = 0.0;
            for i in 1..n_mmf {
                let h = fsurf.mmf_grid[i] - fsurf.mmf_grid[i - 1];
                acc += 0.5 * h * (fsurf.values[i][t] + fsurf.values[i - 1][t]);
                coenergy[i][p] = acc;
            }
        }
        elem = model.element_shift[elem];
    }

    // central difference with periodic wrap over the unfolded columns
    let mut values = vec![vec![0.0; n_th]; n_mmf];
    for t in 0..n_th {
        let p = t % total;
        let next = (p + 1) % total;
        let prev = (p + total - 1) % total;
        for i in 0..n_mmf {
            values[i][t] = -(coenergy[i][next] - coenergy[i][prev]) / (2.0 * dtheta);
        }
    }

    Ok(SampledSurface {
        mmf_grid: surf.mmf_grid.clone(),
        theta_grid: surf.theta_grid.clone(),
        values,
    })
}

// ---------------------------------------------------------------------------
// affine special case
// ---------------------------------------------------------------------------

/// Result of eliminating the magnetic variables when ψ = A·F + b(θ) with a
/// θ-independent diagonal slope matrix A: λ(θ) = L·i(θ) + k(θ).
#[derive(Debug, Clone)]
pub struct AffineReduction {
    /// Inductance matrix L = Cᵀ(M A⁻¹ Mᵀ)⁻¹ C, henry.
    pub inductance: DMatrix<f64>,
    /// Diagonal slope matrix A, weber per ampere-turn.
    pub slope: Vec<f64>,
    /// Flux offsets b_k(θ_t) per grid angle (m rows per angle).
    pub offsets: Vec<DVector<f64>>,
    /// Back-EMF offsets k(θ_t) = Cᵀ(M A⁻¹ Mᵀ)⁻¹ A⁻¹ M b(θ_t) per grid angle.
    pub back_emf: Vec<DVector<f64>>,
    pub theta_grid: Vec<f64>,
}

/// Extract the affine reduction (L, k(θ)) from a model whose characteristics
/// are affine in F with θ-independent slope. Rejects non-affine data with a
/// diagnostic naming the offending element.
pub fn affine_reduction(model: &MotorModel) -> Result<AffineReduction, ModelError> {
    let m = model.m_elements;
    let n_th = model.flux_char[0].n_theta();
    let mut slope = vec![0.0; m];
    let mut offsets_kt = vec![vec![0.0; m]; n_th];

    for k in 0..m {
        let surf = &model.flux_char[k];
        let scale = surf
            .values
            .iter()
            .flat_map(|r| r.iter())
            .fold(0.0f64, |a, &b| a.max(b.abs()))
            .max(1e-30);
        let mut slope_k = None;
        for t in 0..surf.n_theta() {
            // least-squares line through the column, then residual audit
            let npts = surf.n_mmf() as f64;
            let sx: f64 = surf.mmf_grid.iter().sum();
            let sy: f64 = (0..surf.n_mmf()).map(|i| surf.values[i][t]).sum();
            let sxx: f64 = surf.mmf_grid.iter().map(|x| x * x).sum();
            let sxy: f64 = (0..surf.n_mmf())
                .map(|i| surf.mmf_grid[i] * surf.values[i][t])
                .sum();
            let det = npts * sxx - sx * sx;
            let a = (npts * sxy - sx * sy) / det;
            let b = (sy - a * sx) / npts;
            for i in 0..surf.n_mmf() {
                let pred = a * surf.mmf_grid[i] + b;
                if (surf.values[i][t] - pred).abs() > 1e-7 * scale {
                    return Err(ModelError::NotAffine {
                        element: k,
                        msg: format!(
                            "sample at (F={}, θ index {t}) deviates from the fitted line",
                            surf.mmf_grid[i]
                        ),
                    });
                }
            }
            match slope_k {
                None => slope_k = Some(a),
                Some(a0) => {
                    if (a - a0).abs() > 1e-7 * a0.abs().max(1e-30) {
                        return Err(ModelError::NotAffine {
                            element: k,
                            msg: format!("slope varies with θ ({a0} vs {a} at θ index {t})"),
                        });
                    }
                }
            }
            offsets_kt[t][k] = b;
        }
        let a0 = slope_k.unwrap();
        if !(a0 > 0.0) {
            return Err(ModelError::NotAffine {
                element: k,
                msg: "slope must be positive".into(),
            });
        }
        slope[k] = a0;
    }

    let a_inv = DMatrix::from_diagonal(&DVector::from_iterator(m, slope.iter().map(|&a| 1.0 / a)));
    let mm = &model.mesh_matrix * &a_inv * model.mesh_matrix.transpose();
    let mm_inv = mm
        .try_inverse()
        .ok_or_else(|| invalid("mesh_matrix", "M A⁻¹ Mᵀ is singular"))?;
    let inductance = model.geometry_matrix.transpose() * &mm_inv * &model.geometry_matrix;
    let kmat = model.geometry_matrix.transpose() * &mm_inv * &a_inv * &model.mesh_matrix;

    let mut offsets = Vec::with_capacity(n_th);
    let mut back_emf = Vec::with_capacity(n_th);
    for row in &offsets_kt {
        let b = DVector::from_column_slice(row);
        back_emf.push(&kmat * &b);
        offsets.push(b);
    }

    Ok(AffineReduction {
        inductance,
        slope,
        offsets,
        back_emf,
        theta_grid: model.flux_char[0].theta_grid.clone(),
    })
}

// ---------------------------------------------------------------------------
// example motor
// ---------------------------------------------------------------------------

/// Synthetic saturating flux surface for one element of the example motor.
///
/// f_k(F, θ) = ψ_sat(u)·(1 − exp(−F / F_c(u))) with u = N_p·θ + 2πk/K,
/// ψ_sat(u) = 0.015 − 0.010·cos(u) Wb and F_c(u) = 1500 − 500·cos(u) At.
/// Both modulation functions are 2π/N_p-periodic in θ, the surface is strictly
/// increasing and saturating in F, and f(0, θ) = 0.
pub fn synthetic_flux_value(element: usize, phase_count: usize, pole_pairs: usize, f: f64, theta: f64) -> f64 {
    let u = pole_pairs as f64 * theta + 2.0 * std::f64::consts::PI * element as f64 / phase_count as f64;
    let psi_sat = 0.015 - 0.010 * u.cos();
    let f_c = 1500.0 - 500.0 * u.cos();
    psi_sat * (1.0 - (-f / f_c).exp())
}

fn synthetic_surface(
    element: usize,
    phase_count: usize,
    pole_pairs: usize,
    mmf_grid: Vec<f64>,
    theta_grid: Vec<f64>,
) -> SampledSurface {
    let values = mmf_grid
        .iter()
        .map(|&f| {
            theta_grid
                .iter()
                .map(|&th| synthetic_flux_value(element, phase_count, pole_pairs, f, th))
                .collect()
        })
        .collect();
    SampledSurface {
        mmf_grid,
        theta_grid,
        values,
    }
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2);
    (0..n)
        .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
        .collect()
}

/// The worked three-phase example: n = m = l = 3, R = 0.1·I Ω, fully pitched
/// mesh matrix, C = 102·I turns, 600 V limit, N_p = 2 pole pairs, K = 3
/// phases, MMF breakpoints (0, 1000, 2000, 3500, 6000) At, and the synthetic
/// saturating flux surface sampled on a 241 × 41 grid.
pub fn example_motor() -> MotorModel {
    example_motor_sampled(241, 41)
}

/// Same motor as [`example_motor`] with caller-chosen surface sampling.
pub fn example_motor_sampled(n_mmf: usize, n_theta: usize) -> MotorModel {
    let pole_pairs = 2;
    let phase_count = 3;
    let span = 2.0 * std::f64::consts::PI / (phase_count as f64 * pole_pairs as f64);
    let mmf_grid = linspace(0.0, 6000.0, n_mmf);
    let theta_grid = linspace(0.0, span, n_theta);
    let flux_char = (0..3)
        .map(|k| synthetic_surface(k, phase_count, pole_pairs, mmf_grid.clone(), theta_grid.clone()))
        .collect();
    let model = MotorModel {
        name: "fully-pitched-3ph".into(),
        n_windings: 3,
        m_elements: 3,
        l_meshes: 3,
        resistance: vec![0.1; 3],
        mesh_matrix: DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0]),
        geometry_matrix: DMatrix::from_diagonal_element(3, 3, 0.5 * 204.0),
        v_max: 600.0,
        i_max: None,
        pole_pairs,
        phase_count,
        winding_shift: vec![1, 2, 0],
        element_shift: vec![1, 2, 0],
        mesh_shift: vec![1, 2, 0],
        permanent_magnet: false,
        breakpoints: vec![0.0, 1000.0, 2000.0, 3500.0, 6000.0],
        flux_char,
    };
    debug_assert!(model.validate().is_ok());
    model
}

// ---------------------------------------------------------------------------
// JSON schema
// ---------------------------------------------------------------------------

/// On-disk model format. Matrices are row-major nested arrays; keys carry
/// units. `pwa` optionally embeds a fitted piecewise-affine characteristic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema: String,
    #[serde(default)]
    pub name: String,
    pub n_windings: usize,
    pub m_elements: usize,
    pub l_meshes: usize,
    pub resistance_ohm: Vec<f64>,
    pub mesh_matrix: Vec<Vec<f64>>,
    pub geometry_matrix_turns: Vec<Vec<f64>>,
    pub v_max_volt: f64,
    #[serde(default)]
    pub i_max_amp: Option<f64>,
    pub pole_pairs: usize,
    pub phase_count: usize,
    pub winding_shift: Vec<usize>,
    pub element_shift: Vec<usize>,
    pub mesh_shift: Vec<usize>,
    #[serde(default)]
    pub permanent_magnet: bool,
    pub breakpoints_at: Vec<f64>,
    pub flux_surfaces: Vec<SurfaceFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pwa: Option<PwaJson>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurfaceFile {
    pub mmf_grid_at: Vec<f64>,
    pub theta_grid_rad: Vec<f64>,
    /// values_wb[i][t] = f(mmf_grid_at[i], theta_grid_rad[t])
    pub values_wb: Vec<Vec<f64>>,
}

impl ModelFile {
    pub fn from_model(model: &MotorModel, pwa: Option<PwaJson>) -> Self {
        let mat = |m: &DMatrix<f64>| {
            (0..m.nrows())
                .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
                .collect()
        };
        ModelFile {
            schema: MODEL_SCHEMA.into(),
            name: model.name.clone(),
            n_windings: model.n_windings,
            m_elements: model.m_elements,
            l_meshes: model.l_meshes,
            resistance_ohm: model.resistance.clone(),
            mesh_matrix: mat(&model.mesh_matrix),
            geometry_matrix_turns: mat(&model.geometry_matrix),
            v_max_volt: model.v_max,
            i_max_amp: model.i_max,
            pole_pairs: model.pole_pairs,
            phase_count: model.phase_count,
            winding_shift: model.winding_shift.clone(),
            element_shift: model.element_shift.clone(),
            mesh_shift: model.mesh_shift.clone(),
            permanent_magnet: model.permanent_magnet,
            breakpoints_at: model.breakpoints.clone(),
            flux_surfaces: model
                .flux_char
                .iter()
                .map(|s| SurfaceFile {
                    mmf_grid_at: s.mmf_grid.clone(),
                    theta_grid_rad: s.theta_grid.clone(),
                    values_wb: s.values.clone(),
                })
                .collect(),
            pwa,
        }
    }

    pub fn into_model(self) -> Result<MotorModel, ModelError> {
        if self.schema != MODEL_SCHEMA {
            return Err(invalid(
                "schema",
                format!("expected {MODEL_SCHEMA:?}, got {:?}", self.schema),
            ));
        }
        let to_mat = |rows: &Vec<Vec<f64>>, nr: usize, nc: usize, path: &str| -> Result<DMatrix<f64>, ModelError> {
            if rows.len() != nr || rows.iter().any(|r| r.len() != nc) {
                return Err(invalid(path, format!("must be {nr}×{nc} row-major")));
            }
            Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
        };
        let model = MotorModel {
            name: self.name,
            n_windings: self.n_windings,
            m_elements: self.m_elements,
            l_meshes: self.l_meshes,
            resistance: self.resistance_ohm,
            mesh_matrix: to_mat(&self.mesh_matrix, self.l_meshes, self.m_elements, "mesh_matrix")?,
            geometry_matrix: to_mat(
                &self.geometry_matrix_turns,
                self.l_meshes,
                self.n_windings,
                "geometry_matrix_turns",
            )?,
            v_max: self.v_max_volt,
            i_max: self.i_max_amp,
            pole_pairs: self.pole_pairs,
            phase_count: self.phase_count,
            winding_shift: self.winding_shift,
            element_shift: self.element_shift,
            mesh_shift: self.mesh_shift,
            permanent_magnet: self.permanent_magnet,
            breakpoints: self.breakpoints_at,
            flux_char: self
                .flux_surfaces
                .into_iter()
                .map(|s| SampledSurface {
                    mmf_grid: s.mmf_grid_at,
                    theta_grid: s.theta_grid_rad,
                    values: s.values_wb,
                })
                .collect(),
        };
        model.validate()?;
        Ok(model)
    }
}

/// Load and validate a model file; the embedded PWA block (if any) is returned
/// alongside so callers can skip refitting.
pub fn load_model(path: &std::path::Path) -> Result<(MotorModel, Option<PwaJson>), ModelError> {
    let text = std::fs::read_to_string(path)?;
    let file: ModelFile = serde_json::from_str(&text)?;
    let pwa = file.pwa.clone();
    Ok((file.into_model()?, pwa))
}

pub fn save_model(model: &MotorModel, pwa: Option<PwaJson>, path: &std::path::Path) -> Result<(), ModelError> {
    let file = ModelFile::from_model(model, pwa);
    let text = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, text)?;
    Ok(())
}
