//! Waveform trajectories, their metrics, CSV interchange, and the symmetry
//! unfolding from the reduced domain to the full pole period.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WaveformError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed waveform CSV at line {line}: {msg}")]
    Malformed { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Metrics {
    /// Average torque over the cycle, N·m.
    pub tau_avg: f64,
    /// Quadratic torque ripple (1/T)Σ(τ_t − τ̄)², (N·m)².
    pub ripple: f64,
    /// Average resistive loss, W.
    pub p_loss: f64,
    /// Peak winding-voltage magnitude, V.
    pub v_peak: f64,
    /// P_loss + α·(1/T)Σ(τ_t − τ_des)², the transcription objective, W.
    pub objective: f64,
}

/// Solution trajectories on the reduced grid θ_0..θ_{T−1}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WaveformSolution {
    pub theta: Vec<f64>,
    pub delta: f64,
    /// Reduced-domain length 2π/(K·N_p).
    pub span: f64,
    /// Full pole period 2π/N_p.
    pub pole_period: f64,
    pub phase_count: usize,
    pub winding_shift: Vec<usize>,
    pub element_shift: Vec<usize>,
    pub mesh_shift: Vec<usize>,
    /// current[k][t], A
    pub current: Vec<Vec<f64>>,
    /// voltage[k][t], V
    pub voltage: Vec<Vec<f64>>,
    /// flux_linkage[k][t], Wb
    pub flux_linkage: Vec<Vec<f64>>,
    /// mmf[e][t], At
    pub mmf: Vec<Vec<f64>>,
    /// element_flux[e][t], Wb
    pub element_flux: Vec<Vec<f64>>,
    /// mesh_flux[j][t], Wb
    pub mesh_flux: Vec<Vec<f64>>,
    /// torque[t], N·m
    pub torque: Vec<f64>,
    /// chosen PWA region per element and grid point
    pub region_choice: Vec<Vec<usize>>,
    /// full MIQP solution vector (layout order)
    pub raw: Vec<f64>,
    pub metrics: Metrics,
}

impl WaveformSolution {
    pub fn t_count(&self) -> usize {
        self.theta.len()
    }

    /// Unfold one per-winding family over the full pole period using the
    /// phase-shift map: segment c of winding k is winding σᶜ(k) on the
    /// reduced domain. Output has K·T points spanning [0, 2π/N_p).
    pub fn unfold(series: &[Vec<f64>], shift: &[usize], phase_count: usize) -> Vec<Vec<f64>> {
        let t = series.first().map(|s| s.len()).unwrap_or(0);
        let mut out = vec![Vec::with_capacity(phase_count * t); series.len()];
        for (k, row) in out.iter_mut().enumerate() {
            let mut idx = k;
            for _ in 0..phase_count {
                row.extend_from_slice(&series[idx]);
                idx = shift[idx];
            }
        }
        out
    }

    pub fn unfolded_theta(&self) -> Vec<f64> {
        let t = self.t_count();
        let mut out = Vec::with_capacity(self.phase_count * t);
        for c in 0..self.phase_count {
            for i in 0..t {
                out.push(c as f64 * self.span + self.theta[i]);
            }
        }
        out
    }

    // -----------------------------------------------------------------
    // CSV interchange
    // -----------------------------------------------------------------

    pub fn csv_header(&self) -> String {
        let n = self.current.len();
        let m = self.mmf.len();
        let l = self.mesh_flux.len();
        let mut cols = vec!["t".to_string(), "theta_rad".to_string()];
        cols.extend((1..=n).map(|k| format!("i_{k}_A")));
        cols.extend((1..=n).map(|k| format!("v_{k}_V")));
        cols.extend((1..=n).map(|k| format!("lambda_{k}_Wb")));
        cols.extend((1..=m).map(|e| format!("F_{e}_At")));
        cols.extend((1..=m).map(|e| format!("psi_{e}_Wb")));
        cols.extend((1..=l).map(|j| format!("phi_{j}_Wb")));
        cols.push("tau_Nm".to_string());
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# reluct-waveform v1 span_rad={} pole_period_rad={} phase_count={} delta_rad={} winding_shift={} element_shift={} mesh_shift={}\n",
            self.span,
            self.pole_period,
            self.phase_count,
            self.delta,
            join_idx(&self.winding_shift),
            join_idx(&self.element_shift),
            join_idx(&self.mesh_shift),
        );
        out.push_str(&self.csv_header());
        out.push('\n');
        for t in 0..self.t_count() {
            let mut row = vec![t.to_string(), fmt(self.theta[t])];
            for fam in [&self.current, &self.voltage, &self.flux_linkage, &self.mmf, &self.element_flux, &self.mesh_flux] {
                for series in fam.iter() {
                    row.push(fmt(series[t]));
                }
            }
            row.push(fmt(self.torque[t]));
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Parse a waveform CSV produced by [`to_csv`]. Metrics and regions are
    /// not stored in the CSV and come back empty.
    pub fn from_csv(text: &str) -> Result<WaveformSolution, WaveformError> {
        let mut lines = text.lines().enumerate();
        let (_, meta) = lines.next().ok_or(WaveformError::Malformed {
            line: 1,
            msg: "empty file".into(),
        })?;
        if !meta.starts_with("# reluct-waveform v1") {
            return Err(WaveformError::Malformed {
                line: 1,
                msg: "missing versioned header".into(),
            });
        }
        let get = |key: &str| -> Result<String, WaveformError> {
            meta.split_whitespace()
                .find_map(|tok| tok.strip_prefix(&format!("{key}=")).map(str::to_string))
                .ok_or(WaveformError::Malformed {
                    line: 1,
                    msg: format!("missing {key}"),
                })
        };
        let span: f64 = get("span_rad")?.parse().map_err(|_| bad(1, "span"))?;
        let pole_period: f64 = get("pole_period_rad")?.parse().map_err(|_| bad(1, "pole_period"))?;
        let phase_count: usize = get("phase_count")?.parse().map_err(|_| bad(1, "phase_count"))?;
        let delta: f64 = get("delta_rad")?.parse().map_err(|_| bad(1, "delta"))?;
        let parse_shift = |s: String| -> Vec<usize> {
            s.split(';').filter_map(|v| v.parse().ok()).collect()
        };
        let winding_shift = parse_shift(get("winding_shift")?);
        let element_shift = parse_shift(get("element_shift")?);
        let mesh_shift = parse_shift(get("mesh_shift")?);

        let (hline, header) = lines.next().ok_or(bad(2, "missing column header"))?;
        let cols: Vec<&str> = header.split(',').collect();
        let n = cols.iter().filter(|c| c.starts_with("i_")).count();
        let m = cols.iter().filter(|c| c.starts_with("F_")).count();
        let l = cols.iter().filter(|c| c.starts_with("phi_")).count();
        if cols.len() != 2 + 3 * n + 2 * m + l + 1 {
            return Err(bad(hline + 1, "column count mismatch"));
        }
        let mut sol = WaveformSolution {
            theta: vec![],
            delta,
            span,
            pole_period,
            phase_count,
            winding_shift,
            element_shift,
            mesh_shift,
            current: vec![vec![]; n],
            voltage: vec![vec![]; n],
            flux_linkage: vec![vec![]; n],
            mmf: vec![vec![]; m],
            element_flux: vec![vec![]; m],
            mesh_flux: vec![vec![]; l],
            torque: vec![],
            region_choice: vec![],
            raw: vec![],
            metrics: Metrics::default(),
        };
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Result<Vec<f64>, _> = line.split(',').skip(1).map(str::parse::<f64>).collect();
            let vals = vals.map_err(|_| bad(lineno + 1, "non-numeric field"))?;
            if vals.len() != 1 + 3 * n + 2 * m + l + 1 {
                return Err(bad(lineno + 1, "field count mismatch"));
            }
            let mut it = vals.into_iter();
            sol.theta.push(it.next().unwrap());
            for fam in [&mut sol.current, &mut sol.voltage, &mut sol.flux_linkage] {
                for series in fam.iter_mut() {
                    series.push(it.next().unwrap());
                }
            }
            for fam in [&mut sol.mmf, &mut sol.element_flux] {
                for series in fam.iter_mut() {
                    series.push(it.next().unwrap());
                }
            }
            for series in sol.mesh_flux.iter_mut() {
                series.push(it.next().unwrap());
            }
            sol.torque.push(it.next().unwrap());
        }
        if sol.theta.is_empty() {
            return Err(bad(3, "no data rows"));
        }
        Ok(sol)
    }

    /// Tidy per-quantity series over the full pole period, one CSV per
    /// quantity, for any plotting tool.
    pub fn plotdata_bundle(&self) -> Vec<(String, String)> {
        let theta = self.unfolded_theta();
        let mut out = Vec::new();
        let families: [(&str, &Vec<Vec<f64>>, &Vec<usize>, &str); 3] = [
            ("current", &self.current, &self.winding_shift, "i_A"),
            ("voltage", &self.voltage, &self.winding_shift, "v_V"),
            ("flux_linkage", &self.flux_linkage, &self.winding_shift, "lambda_Wb"),
        ];
        for (name, series, shift, unit) in families {
            let unfolded = Self::unfold(series, shift, self.phase_count);
            let mut text = format!("# reluct-plotdata v1 quantity={name}\nwinding,theta_rad,{unit}\n");
            for (k, row) in unfolded.iter().enumerate() {
                for (i, v) in row.iter().enumerate() {
                    text.push_str(&format!("{},{},{}\n", k + 1, fmt(theta[i]), fmt(*v)));
                }
            }
            out.push((format!("{name}.csv"), text));
        }
        // total torque tiles with the reduced period
        let mut text = String::from("# reluct-plotdata v1 quantity=torque\ntheta_rad,tau_Nm\n");
        for c in 0..self.phase_count {
            for (i, v) in self.torque.iter().enumerate() {
                text.push_str(&format!("{},{}\n", fmt(c as f64 * self.span + self.theta[i]), fmt(*v)));
            }
        }
        out.push(("torque.csv".to_string(), text));
        out
    }
}

fn join_idx(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn bad(line: usize, msg: &str) -> WaveformError {
    WaveformError::Malformed {
        line,
        msg: msg.into(),
    }
}

fn fmt(v: f64) -> String {
    // shortest round-trip form
    format!("{}", v)
}
