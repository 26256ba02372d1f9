use reluct::model::example_motor;
use reluct::pwa::fit_model;
use reluct::qp::{QpConfig, Workspace};
use reluct::transcribe::{transcribe, Grid, TranscribeOptions};

fn main() {
    let model = example_motor();
    let pwa = fit_model(&model, &model.breakpoints).unwrap();
    let grid = Grid::new(&model, 40);
    let omega = 1000.0 * 2.0 * std::f64::consts::PI / 60.0;
    for persp in [false, true] {
        let prob = transcribe(&model, &pwa, &grid, omega, 10.0, 3.0, TranscribeOptions { perspective: persp }).unwrap();
        let t0 = std::time::Instant::now();
        let cfg = QpConfig { eps: 1e-8, max_iter: 4000, ..QpConfig::default() };
        let mut ws = Workspace::new(&prob.relaxation(&[]), &cfg);
        let setup = t0.elapsed().as_secs_f64();
        let t1 = std::time::Instant::now();
        let res = ws.solve(None);
        println!(
            "persp={persp} setup {setup:.2}s solve {:.2}s status {:?} iters {} obj {:.6e} kkt stat {:.2e} prim {:.2e} comp {:.2e} polished {}",
            t1.elapsed().as_secs_f64(), res.status, res.iterations, res.objective,
            res.kkt.stationarity, res.kkt.primal, res.kkt.complementarity, res.polished
        );
    }
}
