//! Global branch and bound over the SOS1 region groups.
//!
//! Best-bound node selection with depth-first plunging, interval branching on
//! the ordered region windows, a fix-and-resolve rounding heuristic for
//! incumbents, lazily separated perspective cuts, and a certified relative
//! gap. Node relaxations are solved by [`crate::qp`] with warm starts; only
//! variable bounds differ between nodes, so the KKT factorization is shared.
//!
//! Single-worker mode is deterministic; more workers share one queue, one
//! incumbent, and one cut pool.

use std::collections::BinaryHeap;
use std::io::Write;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use crate::persp::{perspective_cut, Cut, CutPool};
use crate::qp::{QpConfig, QpStatus, WarmStart, Workspace};
use crate::sparse::CscMatrix;
use crate::transcribe::TranscribedProblem;
use crate::waveform::WaveformSolution;

pub type GroupRange = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnbStatus {
    /// Gap closed to tolerance (or tree exhausted) with an incumbent.
    Optimal,
    TimeLimit,
    NodeLimit,
    /// The root relaxation is infeasible: the continuous model cannot meet
    /// the scenario (for example, the requested torque is unreachable).
    InfeasibleRoot,
    /// Every integer assignment is infeasible although the relaxation is not.
    InfeasibleInteger,
}

#[derive(Debug, Clone)]
pub struct BnbResult {
    pub status: BnbStatus,
    pub incumbent: Option<WaveformSolution>,
    pub upper_bound: f64,
    pub lower_bound: f64,
    /// (ub − lb) / max(1, |ub|)
    pub gap: f64,
    pub nodes: usize,
    pub cuts: usize,
    pub wall_time: Duration,
    /// Root relaxation infeasibility certificate (stacked rows), if any.
    pub root_certificate: Option<Vec<f64>>,
}

impl BnbResult {
    pub fn incumbent_feasible(&self) -> bool {
        self.incumbent.is_some()
    }
}

type NodeHook = Arc<dyn Fn(&[GroupRange], f64, usize) + Send + Sync>;
type LogSink = Arc<dyn Fn(&str) + Send + Sync>;

#[derive(Clone)]
pub struct BnbConfig {
    pub gap_tol: f64,
    pub time_limit: Option<Duration>,
    pub node_limit: Option<usize>,
    pub perspective_on: bool,
    pub qp_eps: f64,
    pub qp_max_iter: usize,
    /// Perspective separation threshold in objective units.
    pub sep_tol: f64,
    pub root_sep_rounds: usize,
    pub node_sep_rounds: usize,
    pub int_tol: f64,
    pub workers: usize,
    pub seed: u64,
    pub progress_every: usize,
    pub log: Option<LogSink>,
    pub trace_path: Option<std::path::PathBuf>,
    /// Test hook invoked after each node relaxation with (ranges, bound,
    /// pooled cut count).
    pub node_hook: Option<NodeHook>,
}

impl Default for BnbConfig {
    fn default() -> Self {
        BnbConfig {
            gap_tol: 1e-3,
            time_limit: None,
            node_limit: None,
            perspective_on: true,
            qp_eps: 1e-8,
            qp_max_iter: 20_000,
            sep_tol: 1e-6,
            root_sep_rounds: 30,
            node_sep_rounds: 3,
            int_tol: 1e-6,
            workers: 1,
            seed: 0,
            progress_every: 50,
            log: None,
            trace_path: None,
            node_hook: None,
        }
    }
}

impl std::fmt::Debug for BnbConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BnbConfig")
            .field("gap_tol", &self.gap_tol)
            .field("time_limit", &self.time_limit)
            .field("node_limit", &self.node_limit)
            .field("perspective_on", &self.perspective_on)
            .field("workers", &self.workers)
            .field("seed", &self.seed)
            .finish()
    }
}

#[derive(Debug, Clone)]
struct Node {
    ranges: Vec<GroupRange>,
    bound: f64,
    depth: u32,
    seq: u64,
    warm: Option<Arc<WarmStart>>,
}

struct QueueEntry(Node);

impl PartialEq for QueueEntry {
    fn eq(&self, other: &Self) -> bool {
        self.0.bound == other.0.bound && self.0.seq == other.0.seq
    }
}
impl Eq for QueueEntry {}
impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueueEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // BinaryHeap is a max-heap: best (lowest) bound first, then FIFO
        other
            .0
            .bound
            .total_cmp(&self.0.bound)
            .then(other.0.seq.cmp(&self.0.seq))
    }
}

struct QueueState {
    heap: BinaryHeap<QueueEntry>,
    in_flight: Vec<(u64, f64)>,
    next_seq: u64,
}

impl QueueState {
    fn open_lower_bound(&self) -> Option<f64> {
        let heap_min = self.heap.peek().map(|e| e.0.bound);
        let flight_min = self
            .in_flight
            .iter()
            .map(|&(_, b)| b)
            .fold(None::<f64>, |acc, b| Some(acc.map_or(b, |a| a.min(b))));
        match (heap_min, flight_min) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, None) => a,
            (None, b) => b,
        }
    }
}

struct Incumbent {
    objective: f64,
    solution: Option<WaveformSolution>,
}

struct Shared<'a> {
    problem: &'a TranscribedProblem,
    cfg: BnbConfig,
    pool: RwLock<CutPool>,
    incumbent: Mutex<Incumbent>,
    queue: Mutex<QueueState>,
    nodes: AtomicUsize,
    done: AtomicU64, // 0 running, else termination code
    trace: Option<Mutex<std::fs::File>>,
    start: Instant,
    root_cert: Mutex<Option<Vec<f64>>>,
}

const DONE_GAP: u64 = 1;
const DONE_TIME: u64 = 2;
const DONE_NODES: u64 = 3;

/// Solve the MIQP globally.
pub fn solve(problem: &TranscribedProblem, cfg: &BnbConfig) -> BnbResult {
    let start = Instant::now();
    let n_groups = problem.sos1_groups.len();
    let full: Vec<GroupRange> = vec![(0, problem.layout.regions - 1); n_groups];

    let trace = cfg
        .trace_path
        .as_ref()
        .and_then(|p| std::fs::File::create(p).ok())
        .map(Mutex::new);

    let shared = Shared {
        problem,
        cfg: cfg.clone(),
        pool: RwLock::new(CutPool::new()),
        incumbent: Mutex::new(Incumbent {
            objective: f64::INFINITY,
            solution: None,
        }),
        queue: Mutex::new(QueueState {
            heap: BinaryHeap::new(),
            in_flight: Vec::new(),
            next_seq: 0,
        }),
        nodes: AtomicUsize::new(0),
        done: AtomicU64::new(0),
        trace,
        start,
        root_cert: Mutex::new(None),
    };

    {
        let mut q = shared.queue.lock().unwrap();
        q.heap.push(QueueEntry(Node {
            ranges: full,
            bound: f64::NEG_INFINITY,
            depth: 0,
            seq: 0,
            warm: None,
        }));
        q.next_seq = 1;
    }

    let workers = cfg.workers.max(1);
    if workers == 1 {
        worker(&shared);
    } else {
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| worker(&shared));
            }
        });
    }

    let cuts = shared.pool.read().unwrap().len();
    let nodes = shared.nodes.load(Ordering::SeqCst);
    let inc = shared.incumbent.into_inner().unwrap();
    let queue = shared.queue.into_inner().unwrap();
    let ub = inc.objective;
    let open_lb = queue.open_lower_bound();
    let lb = match open_lb {
        Some(b) => b.min(ub),
        None => ub,
    };
    let gap = if ub.is_finite() {
        ((ub - lb) / ub.abs().max(1.0)).max(0.0)
    } else if lb == f64::NEG_INFINITY {
        f64::INFINITY
    } else {
        f64::INFINITY
    };
    let done = shared.done.load(Ordering::SeqCst);
    let root_cert = shared.root_cert.into_inner().unwrap();
    let status = if root_cert.is_some() {
        BnbStatus::InfeasibleRoot
    } else if done == DONE_TIME {
        BnbStatus::TimeLimit
    } else if done == DONE_NODES {
        BnbStatus::NodeLimit
    } else if inc.solution.is_none() {
        BnbStatus::InfeasibleInteger
    } else {
        BnbStatus::Optimal
    };
    BnbResult {
        status,
        incumbent: inc.solution,
        upper_bound: ub,
        lower_bound: lb,
        gap,
        nodes,
        cuts,
        wall_time: start.elapsed(),
        root_certificate: root_cert,
    }
}

struct WorkerCtx {
    relax_ws: Workspace,
    fixed_ws: Workspace,
    pool_version: u64,
    qp_cfg: QpConfig,
}

fn make_workspaces(problem: &TranscribedProblem, pool: &CutPool, cfg: &BnbConfig) -> (Workspace, Workspace) {
    let qp_cfg_relax = QpConfig {
        eps: cfg.qp_eps,
        max_iter: cfg.qp_max_iter,
        polish: true,
        ..QpConfig::default()
    };
    let relax = Workspace::new(&problem.relaxation(pool.cuts()), &qp_cfg_relax);
    // incumbent resolves use the plain loss objective (exact at integer
    // points) and no cut rows
    let mut fixed_inst = problem.relaxation(&[]);
    let (p, q, c0) = plain_objective(problem);
    fixed_inst.p = p;
    fixed_inst.q = q;
    fixed_inst.c0 = c0;
    let fixed = Workspace::new(&fixed_inst, &qp_cfg_relax);
    (relax, fixed)
}

/// Plain (current-space) objective on the transcription layout.
pub fn plain_objective(problem: &TranscribedProblem) -> (CscMatrix, Vec<f64>, f64) {
    let lt = &problem.layout;
    let t_count = lt.t_count;
    let weight = 1.0 / t_count as f64;
    let nv = lt.n_vars();
    let mut trips = Vec::new();
    let mut q = vec![0.0; nv];
    for t in 0..t_count {
        trips.push((lt.tau(t), lt.tau(t), 2.0 * problem.alpha * weight));
        q[lt.tau(t)] = -2.0 * problem.alpha * problem.tau_des * weight;
        for k in 0..lt.n {
            trips.push((lt.i(t, k), lt.i(t, k), 2.0 * problem.model.resistance[k] * weight));
        }
    }
    (
        CscMatrix::from_triplets(nv, nv, &trips),
        q,
        problem.alpha * problem.tau_des * problem.tau_des,
    )
}

fn worker(shared: &Shared<'_>) {
    let problem = shared.problem;
    let cfg = &shared.cfg;
    let mut ctx = {
        let pool = shared.pool.read().unwrap();
        let (relax_ws, fixed_ws) = make_workspaces(problem, &pool, cfg);
        WorkerCtx {
            relax_ws,
            fixed_ws,
            pool_version: pool.version(),
            qp_cfg: QpConfig {
                eps: cfg.qp_eps,
                max_iter: cfg.qp_max_iter,
                ..QpConfig::default()
            },
        }
    };

    'main: loop {
        if shared.done.load(Ordering::SeqCst) != 0 {
            break;
        }
        // termination and node acquisition under one lock
        let node = {
            let mut q = shared.queue.lock().unwrap();
            let ub = shared.incumbent.lock().unwrap().objective;
            if let Some(lb) = q.open_lower_bound() {
                if ub.is_finite() && (ub - lb) / ub.abs().max(1.0) <= cfg.gap_tol {
                    shared.done.store(DONE_GAP, Ordering::SeqCst);
                    break;
                }
            }
            if let Some(limit) = cfg.time_limit {
                if shared.start.elapsed() >= limit {
                    shared.done.store(DONE_TIME, Ordering::SeqCst);
                    break;
                }
            }
            if let Some(limit) = cfg.node_limit {
                if shared.nodes.load(Ordering::SeqCst) >= limit {
                    shared.done.store(DONE_NODES, Ordering::SeqCst);
                    break;
                }
            }
            match q.heap.pop() {
                Some(entry) => {
                    let ub = shared.incumbent.lock().unwrap().objective;
                    if entry.0.bound >= ub - 1e-9 * ub.abs().max(1.0) {
                        // whole remaining tree is dominated
                        q.heap.clear();
                        if q.in_flight.is_empty() {
                            break;
                        }
                        continue;
                    }
                    q.in_flight.push((entry.0.seq, entry.0.bound));
                    entry.0
                }
                None => {
                    if q.in_flight.is_empty() {
                        break; // exhausted
                    }
                    drop(q);
                    std::thread::sleep(Duration::from_micros(200));
                    continue;
                }
            }
        };

        // depth-first plunge starting from the popped node
        let mut current = Some(node);
        while let Some(mut node) = current.take() {
            if shared.done.load(Ordering::SeqCst) != 0 {
                release(shared, node.seq);
                break 'main;
            }
            if let Some(limit) = cfg.time_limit {
                if shared.start.elapsed() >= limit {
                    requeue(shared, node);
                    shared.done.store(DONE_TIME, Ordering::SeqCst);
                    break 'main;
                }
            }
            let node_index = shared.nodes.fetch_add(1, Ordering::SeqCst) + 1;
            if let Some(limit) = cfg.node_limit {
                if node_index > limit {
                    requeue(shared, node);
                    shared.done.store(DONE_NODES, Ordering::SeqCst);
                    break 'main;
                }
            }

            let outcome = process_node(shared, &mut ctx, &node);
            if cfg.progress_every > 0 && node_index % cfg.progress_every == 0 {
                log_progress(shared, node_index);
            }
            match outcome {
                Outcome::Infeasible => {
                    trace_line(shared, &node, "infeasible", f64::INFINITY);
                    if node.depth == 0 {
                        // distinguish the root: model-level infeasibility
                    }
                    release(shared, node.seq);
                }
                Outcome::RootInfeasible(cert) => {
                    *shared.root_cert.lock().unwrap() = Some(cert);
                    release(shared, node.seq);
                    break 'main;
                }
                Outcome::Pruned(bound) => {
                    trace_line(shared, &node, "pruned", bound);
                    release(shared, node.seq);
                }
                Outcome::Fathomed(bound) => {
                    trace_line(shared, &node, "integral", bound);
                    release(shared, node.seq);
                }
                Outcome::Branched {
                    bound,
                    plunge,
                    sibling,
                } => {
                    trace_line(shared, &node, "branched", bound);
                    let plunge_seq;
                    {
                        let mut q = shared.queue.lock().unwrap();
                        plunge_seq = q.next_seq;
                        q.next_seq += 2;
                        // sibling goes to the queue, plunge child continues here
                        q.heap.push(QueueEntry(Node {
                            seq: plunge_seq + 1,
                            ..sibling
                        }));
                        q.in_flight.push((plunge_seq, bound));
                    }
                    release(shared, node.seq);
                    node = Node {
                        seq: plunge_seq,
                        ..plunge
                    };
                    current = Some(node);
                }
            }
        }
    }
}

fn release(shared: &Shared<'_>, seq: u64) {
    let mut q = shared.queue.lock().unwrap();
    q.in_flight.retain(|&(s, _)| s != seq);
}

fn requeue(shared: &Shared<'_>, node: Node) {
    let mut q = shared.queue.lock().unwrap();
    q.in_flight.retain(|&(s, _)| s != node.seq);
    q.heap.push(QueueEntry(node));
}

enum Outcome {
    Infeasible,
    RootInfeasible(Vec<f64>),
    Pruned(f64),
    Fathomed(f64),
    Branched {
        bound: f64,
        plunge: Node,
        sibling: Node,
    },
}

fn process_node(shared: &Shared<'_>, ctx: &mut WorkerCtx, node: &Node) -> Outcome {
    let problem = shared.problem;
    let cfg = &shared.cfg;

    // refresh workspaces if the cut pool moved
    {
        let pool = shared.pool.read().unwrap();
        if pool.version() != ctx.pool_version {
            let (relax_ws, fixed_ws) = make_workspaces(problem, &pool, cfg);
            ctx.relax_ws = relax_ws;
            ctx.fixed_ws = fixed_ws;
            ctx.pool_version = pool.version();
        }
    }

    let (lb_vec, ub_vec) = bounds_for_ranges(problem, &node.ranges);
    ctx.relax_ws.set_box_bounds(&lb_vec, &ub_vec);
    let warm = node.warm.as_deref();
    let mut res = ctx.relax_ws.solve(warm);
    // lazy perspective separation at the node optimum
    if cfg.perspective_on && problem.layout.perspective {
        let rounds = if node.depth == 0 {
            cfg.root_sep_rounds
        } else {
            cfg.node_sep_rounds
        };
        for _ in 0..rounds {
            if res.status != QpStatus::Optimal {
                break;
            }
            let added = separate(shared, &res.x);
            if added == 0 {
                break;
            }
            let pool = shared.pool.read().unwrap();
            let (relax_ws, fixed_ws) = make_workspaces(problem, &pool, cfg);
            ctx.relax_ws = relax_ws;
            ctx.fixed_ws = fixed_ws;
            ctx.pool_version = pool.version();
            ctx.relax_ws.set_box_bounds(&lb_vec, &ub_vec);
            let ws_warm = WarmStart::from_result(&res);
            res = ctx.relax_ws.solve(Some(&ws_warm));
        }
    }

    match res.status {
        QpStatus::PrimalInfeasible => {
            if node.depth == 0 {
                let cert = res.certificate.clone().unwrap_or_default();
                return Outcome::RootInfeasible(cert);
            }
            return Outcome::Infeasible;
        }
        QpStatus::IterationLimit => {
            // no certified bound: keep the parent bound and branch on the
            // best iterate so the subtree is not wrongly pruned
        }
        QpStatus::Optimal => {}
    }
    let bound = if res.status == QpStatus::Optimal {
        res.objective.max(node.bound)
    } else {
        node.bound
    };

    if let Some(hook) = &cfg.node_hook {
        hook(&node.ranges, bound, shared.pool.read().unwrap().len());
    }

    let ub_now = shared.incumbent.lock().unwrap().objective;
    if bound >= ub_now - 1e-9 * ub_now.abs().max(1.0) {
        return Outcome::Pruned(bound);
    }

    // integral?
    if res.status == QpStatus::Optimal {
        if let Some(choice) = integral_choice(problem, &node.ranges, &res.x, cfg.int_tol) {
            try_incumbent(shared, ctx, &choice);
            return Outcome::Fathomed(bound);
        }
        // rounding heuristic: fix each group to its largest selector
        let choice = round_choice(problem, &node.ranges, &res.x);
        try_incumbent(shared, ctx, &choice);
        let ub_now = shared.incumbent.lock().unwrap().objective;
        if bound >= ub_now - 1e-9 * ub_now.abs().max(1.0) {
            return Outcome::Pruned(bound);
        }
    }

    match branch_rule(problem, &node.ranges, &res.x, cfg.int_tol) {
        None => {
            // relaxation fractional but no branchable group (numerical edge);
            // fathom with the bound
            Outcome::Fathomed(bound)
        }
        Some((g, split)) => {
            let (lo, hi) = node.ranges[g];
            let mut low = node.ranges.clone();
            low[g] = (lo, split);
            let mut high = node.ranges.clone();
            high[g] = (split + 1, hi);
            // plunge into the child containing the strongest selector
            let group = &problem.sos1_groups[g];
            let best_j = (lo..=hi)
                .max_by(|&a, &b| {
                    res.x[group.s_indices[a]]
                        .total_cmp(&res.x[group.s_indices[b]])
                })
                .unwrap();
            let warm = Arc::new(WarmStart::from_result(&res));
            let (plunge_ranges, sibling_ranges) = if best_j <= split {
                (low, high)
            } else {
                (high, low)
            };
            Outcome::Branched {
                bound,
                plunge: Node {
                    ranges: plunge_ranges,
                    bound,
                    depth: node.depth + 1,
                    seq: 0,
                    warm: Some(warm.clone()),
                },
                sibling: Node {
                    ranges: sibling_ranges,
                    bound,
                    depth: node.depth + 1,
                    seq: 0,
                    warm: None,
                },
            }
        }
    }
}

/// Box bounds realizing the admissible region windows.
fn bounds_for_ranges(problem: &TranscribedProblem, ranges: &[GroupRange]) -> (Vec<f64>, Vec<f64>) {
    let lt = &problem.layout;
    let bp = &problem.breakpoints;
    let mut lb = problem.lb.clone();
    let mut ub = problem.ub.clone();
    for (g, &(lo, hi)) in ranges.iter().enumerate() {
        let group = &problem.sos1_groups[g];
        let (t, e) = (group.t, group.element);
        lb[lt.f(t, e)] = bp[lo];
        ub[lt.f(t, e)] = bp[hi + 1];
        for j in 0..lt.regions {
            if j < lo || j > hi {
                let zi = lt.z(t, e, j);
                let si = lt.s(t, e, j);
                lb[zi] = 0.0;
                ub[zi] = 0.0;
                lb[si] = 0.0;
                ub[si] = 0.0;
                if lt.perspective {
                    let wi = lt.w(t, e, j);
                    lb[wi] = 0.0;
                    ub[wi] = 0.0;
                }
            }
        }
    }
    (lb, ub)
}

/// Fix an explicit region choice through bounds.
fn bounds_for_choice(problem: &TranscribedProblem, choice: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let lt = &problem.layout;
    let bp = &problem.breakpoints;
    let mut lb = problem.lb.clone();
    let mut ub = problem.ub.clone();
    for (g, &jc) in choice.iter().enumerate() {
        let group = &problem.sos1_groups[g];
        let (t, e) = (group.t, group.element);
        lb[lt.f(t, e)] = bp[jc];
        ub[lt.f(t, e)] = bp[jc + 1];
        for j in 0..lt.regions {
            let zi = lt.z(t, e, j);
            let si = lt.s(t, e, j);
            if j == jc {
                lb[si] = 1.0;
                ub[si] = 1.0;
                lb[zi] = bp[j].min(bp[j + 1]);
                ub[zi] = bp[j].max(bp[j + 1]);
            } else {
                lb[si] = 0.0;
                ub[si] = 0.0;
                lb[zi] = 0.0;
                ub[zi] = 0.0;
            }
            if lt.perspective {
                let wi = lt.w(t, e, j);
                if j == jc {
                    lb[wi] = 0.0;
                    ub[wi] = (bp[j] * bp[j]).max(bp[j + 1] * bp[j + 1]);
                } else {
                    lb[wi] = 0.0;
                    ub[wi] = 0.0;
                }
            }
        }
    }
    (lb, ub)
}

/// If every group has one selector at 1 within tolerance, return the choices.
fn integral_choice(
    problem: &TranscribedProblem,
    ranges: &[GroupRange],
    x: &[f64],
    int_tol: f64,
) -> Option<Vec<usize>> {
    let mut choice = Vec::with_capacity(ranges.len());
    for (g, &(lo, hi)) in ranges.iter().enumerate() {
        let group = &problem.sos1_groups[g];
        let mut best = lo;
        let mut best_v = f64::NEG_INFINITY;
        for j in lo..=hi {
            let v = x[group.s_indices[j]];
            if v > best_v {
                best_v = v;
                best = j;
            }
        }
        if best_v < 1.0 - int_tol {
            return None;
        }
        choice.push(best);
    }
    Some(choice)
}

fn round_choice(problem: &TranscribedProblem, ranges: &[GroupRange], x: &[f64]) -> Vec<usize> {
    ranges
        .iter()
        .enumerate()
        .map(|(g, &(lo, hi))| {
            let group = &problem.sos1_groups[g];
            (lo..=hi)
                .max_by(|&a, &b| x[group.s_indices[a]].total_cmp(&x[group.s_indices[b]]))
                .unwrap_or(lo)
        })
        .collect()
}

/// Fix-and-resolve: solve the plain-objective QP with the given assignment;
/// a feasible result becomes an incumbent candidate.
fn try_incumbent(shared: &Shared<'_>, ctx: &mut WorkerCtx, choice: &[usize]) -> bool {
    let problem = shared.problem;
    let (lb, ub) = bounds_for_choice(problem, choice);
    ctx.fixed_ws.set_box_bounds(&lb, &ub);
    let res = ctx.fixed_ws.solve(None);
    if res.status != QpStatus::Optimal {
        return false;
    }
    let mut x = res.x.clone();
    snap_integral(problem, choice, &mut x);
    let report = problem.check_point(&x, &[]);
    if !report.feasible() {
        return false;
    }
    let sol = match problem.assemble_waveforms(&x) {
        Ok(s) => s,
        Err(_) => return false,
    };
    let obj = sol.metrics.objective;
    let mut inc = shared.incumbent.lock().unwrap();
    if obj < inc.objective {
        inc.objective = obj;
        inc.solution = Some(sol);
        true
    } else {
        false
    }
}

/// Make binaries exactly integral and define the epigraph values w = z²/s.
fn snap_integral(problem: &TranscribedProblem, choice: &[usize], x: &mut [f64]) {
    let lt = &problem.layout;
    for (g, &jc) in choice.iter().enumerate() {
        let group = &problem.sos1_groups[g];
        let (t, e) = (group.t, group.element);
        let mut f_val = 0.0;
        for j in 0..lt.regions {
            let si = lt.s(t, e, j);
            let zi = lt.z(t, e, j);
            if j == jc {
                x[si] = 1.0;
                f_val = x[zi];
            } else {
                x[si] = 0.0;
                x[zi] = 0.0;
            }
            if lt.perspective {
                let wi = lt.w(t, e, j);
                x[wi] = if j == jc { x[zi] * x[zi] } else { 0.0 };
            }
        }
        x[lt.f(t, e)] = f_val;
    }
}

/// Grow the cut pool from the violations at a relaxation optimum; returns the
/// number of cuts added.
fn separate(shared: &Shared<'_>, x: &[f64]) -> usize {
    let problem = shared.problem;
    let cfg = &shared.cfg;
    let lt = &problem.layout;
    let Some(ps) = &problem.perspective else {
        return 0;
    };
    let weight = 1.0 / lt.t_count as f64;
    let mut added = 0;
    let mut pool = shared.pool.write().unwrap();
    for t in 0..lt.t_count {
        for e in 0..lt.m {
            let d = ps.d[e];
            if d <= 0.0 {
                continue;
            }
            for j in 0..lt.regions {
                let z = x[lt.z(t, e, j)];
                let s = x[lt.s(t, e, j)];
                let w = x[lt.w(t, e, j)];
                let s_eff = s.max(1e-9);
                if s <= 1e-9 && z.abs() <= 1e-12 {
                    continue;
                }
                let viol = weight * d * (z * z / s_eff - w);
                if viol > cfg.sep_tol {
                    let sbar = s.clamp(1e-6, 1.0);
                    if let Ok((cz, cs)) = perspective_cut(z, sbar) {
                        if pool.add(Cut {
                            element: e,
                            region: j,
                            t,
                            coef_z: cz,
                            coef_s: cs,
                        }) {
                            added += 1;
                        }
                    }
                }
            }
        }
    }
    added
}

/// Most-fractional-selector branching with an interval split at the
/// s-weighted mean breakpoint. Returns (group, split region j*): children are
/// [lo..=j*] and [j*+1..=hi]. None if every group is integral.
pub fn branch_rule(
    problem: &TranscribedProblem,
    ranges: &[GroupRange],
    x: &[f64],
    int_tol: f64,
) -> Option<(usize, usize)> {
    let bp = &problem.breakpoints;
    let mut best: Option<(f64, usize)> = None; // (max_s, group)
    for (g, &(lo, hi)) in ranges.iter().enumerate() {
        if lo == hi {
            continue;
        }
        let group = &problem.sos1_groups[g];
        let max_s = (lo..=hi)
            .map(|j| x[group.s_indices[j]])
            .fold(f64::NEG_INFINITY, f64::max);
        if max_s >= 1.0 - int_tol {
            continue;
        }
        // groups are ordered by (t, element); keep the first on ties
        match best {
            Some((b, _)) if max_s >= b => {}
            _ => best = Some((max_s, g)),
        }
    }
    let (_, g) = best?;
    let (lo, hi) = ranges[g];
    let group = &problem.sos1_groups[g];
    let mut mass = 0.0;
    let mut mean = 0.0;
    for j in lo..=hi {
        let s = x[group.s_indices[j]].max(0.0);
        mass += s;
        mean += s * bp[j + 1];
    }
    let fbar = if mass > 1e-12 {
        mean / mass
    } else {
        0.5 * (bp[lo] + bp[hi + 1])
    };
    let mut split = lo;
    for j in lo..=hi {
        if fbar >= bp[j] {
            split = j;
        }
    }
    Some((g, split.min(hi - 1)))
}

fn log_progress(shared: &Shared<'_>, node_index: usize) {
    let Some(log) = &shared.cfg.log else { return };
    let (lb, open) = {
        let q = shared.queue.lock().unwrap();
        (q.open_lower_bound(), q.heap.len() + q.in_flight.len())
    };
    let ub = shared.incumbent.lock().unwrap().objective;
    let lb = lb.unwrap_or(ub);
    let gap = if ub.is_finite() {
        ((ub - lb) / ub.abs().max(1.0)).max(0.0)
    } else {
        f64::INFINITY
    };
    let cuts = shared.pool.read().unwrap().len();
    log(&format!(
        "nodes={node_index} open={open} lb={lb:.9e} ub={ub:.9e} gap={gap:.3e} cuts={cuts} elapsed_s={:.1}",
        shared.start.elapsed().as_secs_f64()
    ));
}

fn trace_line(shared: &Shared<'_>, node: &Node, action: &str, bound: f64) {
    let Some(trace) = &shared.trace else { return };
    let ub = shared.incumbent.lock().unwrap().objective;
    let mut f = trace.lock().unwrap();
    let _ = writeln!(
        f,
        "node seq={} depth={} action={action} bound={bound:.9e} ub={ub:.9e}",
        node.seq, node.depth
    );
}

/// Human-readable description of the dominant rows in a root infeasibility
/// certificate: names the binding limit when detectable.
pub fn explain_certificate(problem: &TranscribedProblem, cert: &[f64]) -> String {
    let me = problem.a_eq.nrows;
    let mi = problem.a_in.nrows;
    let mut scored: Vec<(f64, String)> = Vec::new();
    for (i, &v) in cert.iter().enumerate() {
        if v.abs() < 1e-6 {
            continue;
        }
        let name = if i < me {
            format!("{:?}", problem.eq_kinds[i])
        } else if i < me + mi {
            format!("{:?}", problem.in_kinds[i - me])
        } else {
            "VariableBound".to_string()
        };
        scored.push((v.abs(), name));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    scored.dedup_by(|a, b| a.1 == b.1);
    let names: Vec<String> = scored.into_iter().take(3).map(|(_, n)| n).collect();
    if names.is_empty() {
        "no dominant rows in certificate".to_string()
    } else {
        format!("dominant certificate rows: {}", names.join(", "))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::{linspace, MotorModel, SampledSurface};
    use crate::pwa::fit_model;
    use crate::transcribe::{transcribe, Grid, TranscribeOptions};

    pub(crate) fn toy_model(torque_scale: f64) -> MotorModel {
        let mmf = linspace(0.0, 100.0, 41);
        let span = 2.0 * std::f64::consts::PI;
        let theta = linspace(0.0, span, 5);
        let values = mmf
            .iter()
            .map(|&f| {
                theta
                    .iter()
                    .map(|&th| {
                        (2e-3 + torque_scale * 1e-3 * th.sin()) * 30.0 * (1.0 - (-f / 30.0).exp())
                    })
                    .collect()
            })
            .collect();
        MotorModel {
            name: "bnb-toy".into(),
            n_windings: 1,
            m_elements: 1,
            l_meshes: 1,
            resistance: vec![0.5],
            mesh_matrix: nalgebra::DMatrix::identity(1, 1),
            geometry_matrix: nalgebra::DMatrix::from_element(1, 1, 10.0),
            v_max: 60.0,
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

    pub(crate) fn toy_problem(tau_des: f64, alpha: f64, persp: bool) -> crate::transcribe::TranscribedProblem {
        let model = toy_model(1.0);
        let pwa = fit_model(&model, &model.breakpoints.clone()).unwrap();
        let grid = Grid::new(&model, 4);
        transcribe(
            &model,
            &pwa,
            &grid,
            5.0,
            tau_des,
            alpha,
            TranscribeOptions { perspective: persp },
        )
        .unwrap()
    }

    #[test]
    fn origin_scenario_solved_at_root() {
        let prob = toy_problem(0.0, 0.0, false);
        let cfg = BnbConfig {
            gap_tol: 1e-9,
            perspective_on: false,
            ..BnbConfig::default()
        };
        let res = solve(&prob, &cfg);
        assert_eq!(res.status, BnbStatus::Optimal);
        assert!(res.upper_bound.abs() < 1e-7, "objective {}", res.upper_bound);
        let inc = res.incumbent.unwrap();
        assert!(inc.metrics.objective.abs() < 1e-7);
    }

    #[test]
    fn single_region_solves_without_branching() {
        let model = toy_model(1.0);
        let pwa = fit_model(&model, &[0.0, 100.0]).unwrap();
        let grid = Grid::new(&model, 4);
        let prob = transcribe(&model, &pwa, &grid, 5.0, 0.05, 1.0, TranscribeOptions::default()).unwrap();
        let res = solve(
            &prob,
            &BnbConfig {
                gap_tol: 1e-7,
                perspective_on: false,
                ..BnbConfig::default()
            },
        );
        assert_eq!(res.status, BnbStatus::Optimal);
        assert_eq!(res.nodes, 1);
    }

    #[test]
    fn branch_rule_examples() {
        let prob = toy_problem(0.1, 1.0, false);
        // four grid points → four groups of two regions each; craft s values
        let mut x = vec![0.0; prob.n_vars()];
        let lt = &prob.layout;
        for t in 0..4 {
            x[lt.s(t, 0, 0)] = 1.0;
        }
        // integral → None
        let ranges = vec![(0, 1); 4];
        assert!(branch_rule(&prob, &ranges, &x, 1e-6).is_none());
        // split on the most fractional group (t = 2 here)
        x[lt.s(2, 0, 0)] = 0.5;
        x[lt.s(2, 0, 1)] = 0.5;
        x[lt.s(1, 0, 0)] = 0.9;
        x[lt.s(1, 0, 1)] = 0.1;
        let (g, split) = branch_rule(&prob, &ranges, &x, 1e-6).unwrap();
        assert_eq!(prob.sos1_groups[g].t, 2);
        // mean breakpoint = 0.5·50 + 0.5·100 = 75 → region 1 clamps to 0
        assert_eq!(split, 0);
    }

    #[test]
    fn branch_children_partition_parent() {
        let prob = {
            let model = toy_model(1.0);
            let pwa = fit_model(&model, &[0.0, 25.0, 50.0, 75.0, 100.0]).unwrap();
            let grid = Grid::new(&model, 4);
            transcribe(&model, &pwa, &grid, 5.0, 0.1, 1.0, TranscribeOptions::default()).unwrap()
        };
        let lt = prob.layout;
        let mut state = 777u64;
        let mut rnd = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _case in 0..1000 {
            let mut x = vec![0.0; prob.n_vars()];
            let mut ranges = Vec::new();
            for t in 0..4 {
                let lo = (rnd() * 3.0) as usize;
                let hi = lo + ((rnd() * (4 - lo) as f64) as usize).min(3 - lo);
                ranges.push((lo, hi));
                let mut total = 0.0;
                for j in lo..=hi {
                    let v = rnd();
                    x[lt.s(t, 0, j)] = v;
                    total += v;
                }
                for j in lo..=hi {
                    x[lt.s(t, 0, j)] /= total.max(1e-12);
                }
            }
            if let Some((g, split)) = branch_rule(&prob, &ranges, &x, 1e-6) {
                let (lo, hi) = ranges[g];
                assert!(split >= lo && split < hi, "split {split} not in [{lo}, {hi})");
                // children [lo..=split], [split+1..=hi]: nonempty, disjoint,
                // and their union is the parent window
                assert!(lo <= split && split + 1 <= hi);
            }
        }
    }

    #[test]
    fn deterministic_single_worker() {
        let prob = toy_problem(0.08, 2.0, true);
        let cfg = BnbConfig {
            gap_tol: 1e-7,
            ..BnbConfig::default()
        };
        let a = solve(&prob, &cfg);
        let b = solve(&prob, &cfg);
        assert_eq!(a.nodes, b.nodes);
        assert_eq!(a.status, b.status);
        assert_eq!(a.upper_bound.to_bits(), b.upper_bound.to_bits());
    }

    #[test]
    fn incumbents_pass_row_checker() {
        let prob = toy_problem(0.08, 2.0, true);
        let res = solve(
            &prob,
            &BnbConfig {
                gap_tol: 1e-7,
                ..BnbConfig::default()
            },
        );
        assert_eq!(res.status, BnbStatus::Optimal);
        let inc = res.incumbent.unwrap();
        let report = prob.check_point(&inc.raw, &[]);
        assert!(report.feasible(), "{report:?}");
        assert!(report.binaries_integral);
        assert!(report.ripple_identity_gap < 1e-9);
        // bound sanity
        assert!(res.lower_bound <= res.upper_bound + 1e-9);
    }
}
