use reluct::bnb::{solve, BnbConfig};
use reluct::model::example_motor;
use reluct::pwa::fit_model;
use reluct::transcribe::{transcribe, Grid, TranscribeOptions};
use std::sync::Arc;
use std::time::Duration;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let rpm: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1000.0);
    let tau: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10.0);
    let secs: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(900);
    let t0 = std::time::Instant::now();
    let model = example_motor();
    let pwa = fit_model(&model, &model.breakpoints).unwrap();
    let grid = Grid::new(&model, 40);
    let omega = rpm * 2.0 * std::f64::consts::PI / 60.0;
    let prob = transcribe(&model, &pwa, &grid, omega, tau, 3.0, TranscribeOptions { perspective: true }).unwrap();
    println!("setup {:.2}s, nvars {} binaries {}", t0.elapsed().as_secs_f64(), prob.n_vars(), prob.n_binaries());
    let cfg = BnbConfig {
        gap_tol: 1e-2,
        time_limit: Some(Duration::from_secs(secs)),
        log: Some(Arc::new(|line: &str| eprintln!("{line}"))),
        progress_every: 10,
        ..BnbConfig::default()
    };
    let res = solve(&prob, &cfg);
    println!(
        "status {:?} ub {:.6} lb {:.6} gap {:.4e} nodes {} cuts {} time {:.1}s",
        res.status, res.upper_bound, res.lower_bound, res.gap, res.nodes, res.cuts,
        res.wall_time.as_secs_f64()
    );
    if let Some(inc) = &res.incumbent {
        println!("tau_avg {:.6} ripple {:.4e} p_loss {:.3} v_peak {:.2}", inc.metrics.tau_avg, inc.metrics.ripple, inc.metrics.p_loss, inc.metrics.v_peak);
    }
}
