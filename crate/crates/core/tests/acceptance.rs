//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Run with `cargo test --test acceptance`.

mod common;

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swarm_nav::batch::{run_batch, BatchResult, BatchSpec, TableRow};
use swarm_nav::geometry::{min_dist_linear_trajectories, Vec2};
use swarm_nav::mgr::{adjust_mgr, is_mgr_valid};
use swarm_nav::params::{Method, SimParams};
use swarm_nav::qp::{enumeration_oracle, solve, QpError};
use swarm_nav::sim::{run_with, Metrics};
use swarm_nav::world::{generate_scenario, Env, ScenarioConfig};

const SEEDS: u64 = 20;
const BATCH_WALL: Duration = Duration::from_secs(30);
const QP_WALL: Duration = Duration::from_secs(5);
/// Relative shortfall below the safety distance allowed for integration error.
const SAFETY_REL_TOL: f64 = 1e-3;
const COMPUTE_BUDGET: f64 = 5e-3;
const MAX_SCALING_EXPONENT: f64 = 2.0;

struct Report {
    failed: usize,
}

impl Report {
    fn check(&mut self, id: u32, pass: bool, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!("{} criterion {id:>2}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn batch(envs: &[Env], ns: &[usize], methods: &[Method]) -> (BatchResult, Duration) {
    let started = Instant::now();
    let res = run_batch(&BatchSpec {
        envs: envs.to_vec(),
        robot_counts: ns.to_vec(),
        seeds: (0..SEEDS).collect(),
        methods: methods.to_vec(),
        params: SimParams::default(),
        escape_half_angle: None,
    });
    (res, started.elapsed())
}

fn row(res: &BatchResult, env: Env, n: usize, method: Method) -> &TableRow {
    res.rows
        .iter()
        .find(|r| r.env == env && r.n == n && r.method == method)
        .expect("row for every batch cell")
}

fn metrics(res: &BatchResult) -> impl Iterator<Item = &Metrics> {
    res.runs.iter().filter_map(|r| r.metrics.as_ref())
}

fn main() -> ExitCode {
    let mut report = Report { failed: 0 };
    let mut safety_runs: Vec<Metrics> = Vec::new();
    let mut generation_errors = 0;

    // 1: swap deadlocks.
    let (swap, wall) = batch(&[Env::Swap], &[2, 4, 8], &[Method::Mgr, Method::ClfCbf]);
    let mgr: Vec<f64> = [2, 4, 8].iter().map(|&n| row(&swap, Env::Swap, n, Method::Mgr).success_rate).collect();
    let clf2 = row(&swap, Env::Swap, 2, Method::ClfCbf).success_rate;
    report.check(
        1,
        mgr.iter().all(|&s| s >= 95.0) && clf2 == 0.0 && wall < BATCH_WALL,
        format!("swap MGR success {mgr:?} % (need >= 95), CLF-CBF N=2 {clf2} % (need 0), {:.1} s", wall.as_secs_f64()),
    );
    safety_runs.extend(metrics(&swap).cloned());
    generation_errors += swap.runs.iter().filter(|r| r.error.is_some()).count();

    // 2: free space.
    let (free, _) = batch(&[Env::Free], &[10, 20], &[Method::Mgr]);
    let rates: Vec<(f64, f64)> = [10, 20]
        .iter()
        .map(|&n| {
            let r = row(&free, Env::Free, n, Method::Mgr);
            (r.success_rate, r.arrival_rate)
        })
        .collect();
    report.check(
        2,
        rates.iter().all(|&(s, a)| s >= 95.0 && a >= 95.0),
        format!("free (success, arrival) % for N=10, 20: {rates:?} (need >= 95)"),
    );
    safety_runs.extend(metrics(&free).cloned());
    generation_errors += free.runs.iter().filter(|r| r.error.is_some()).count();

    // 3: cluttered environments.
    let (clutter, _) = batch(&[Env::Circ15, Env::Rect15], &[20], &[Method::Mgr]);
    let rates: Vec<(Env, f64, f64)> = [Env::Circ15, Env::Rect15]
        .iter()
        .map(|&e| {
            let r = row(&clutter, e, 20, Method::Mgr);
            (e, r.success_rate, r.arrival_rate)
        })
        .collect();
    report.check(
        3,
        rates.iter().all(|&(_, s, a)| a >= 98.0 && s >= 80.0),
        format!("cluttered (env, success, arrival) %: {rates:?} (need arrival >= 98, success >= 80)"),
    );
    safety_runs.extend(metrics(&clutter).cloned());
    generation_errors += clutter.runs.iter().filter(|r| r.error.is_some()).count();

    // 4: makespan in free space.
    let makespan = row(&free, Env::Free, 20, Method::Mgr).makespan.as_ref().map(|s| s.mean);
    report.check(
        4,
        makespan.is_some_and(|m| (15.0..=35.0).contains(&m)),
        format!("free N=20 mean makespan {makespan:?} s (need within [15, 35])"),
    );

    // 5: compute budget and scaling.
    let params = SimParams::default();
    let mut points = Vec::new();
    let mut worst = 0.0f64;
    let mut audit_violations = 0;
    for n in [20usize, 40, 80, 120] {
        let sc = generate_scenario(&ScenarioConfig::new(Env::Free, n, 0), &params).expect("free scenario");
        let out = run_with(&sc, &params, |_| {});
        points.push(((n as f64).ln(), out.metrics.compute.mean_step.ln()));
        if n == 120 {
            worst = out.metrics.compute.max;
        }
        audit_violations += out.audit.violations;
    }
    let slope = fit_slope(&points);
    report.check(
        5,
        worst <= COMPUTE_BUDGET && slope <= MAX_SCALING_EXPONENT,
        format!(
            "N=120 worst per-robot period {:.3} ms (need <= 5), per-step scaling exponent {slope:.2} (need <= 2), locality violations {audit_violations}",
            worst * 1e3
        ),
    );

    // 6: safety over criteria 1-4.
    let floor = params.control.d_safe() * (1.0 - SAFETY_REL_TOL);
    let min_pair = safety_runs.iter().map(|m| m.min_pairwise_distance).fold(f64::INFINITY, f64::min);
    let min_obs = safety_runs.iter().map(|m| m.min_obstacle_distance).fold(f64::INFINITY, f64::min);
    let violations = safety_runs
        .iter()
        .filter(|m| m.min_pairwise_distance < floor || m.min_obstacle_distance < floor)
        .count();
    report.check(
        6,
        violations == 0 && generation_errors == 0,
        format!(
            "{} runs, {violations} below {floor:.5} m; min pairwise {min_pair:.6}, min obstacle {min_obs:.6}, {generation_errors} generation errors",
            safety_runs.len()
        ),
    );

    // 7: QP solver against enumeration.
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    let mut feasible = 0;
    for _ in 0..1000 {
        let p = common::random_qp(&mut rng, 10);
        let agree = match (solve(&p), enumeration_oracle(&p)) {
            (Ok(s), Ok(o)) => {
                feasible += 1;
                (s.objective - o.objective).abs() <= 1e-6 * (1.0 + o.objective.abs())
                    && common::max_violation(&p, &s.u) <= 1e-8
            }
            (Err(QpError::Infeasible), Err(QpError::Infeasible)) => true,
            _ => false,
        };
        mismatches += usize::from(!agree);
    }
    let wall = started.elapsed();
    report.check(
        7,
        mismatches == 0 && wall < QP_WALL,
        format!("1000 QPs ({feasible} feasible): {mismatches} disagreements, {:.3} s", wall.as_secs_f64()),
    );

    // 8: closed-form closest approach.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_gap = 0.0f64;
    for _ in 0..1000 {
        let mut v = || Vec2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
        let (p_i, v_i, p_j, v_j) = (v(), v(), v(), v());
        let horizon = rng.gen_range(0.0..10.0);
        let (d, _) = min_dist_linear_trajectories(p_i, v_i, p_j, v_j, horizon);
        worst_gap = worst_gap.max((d - common::sampled_min_dist(p_i, v_i, p_j, v_j, horizon)).abs());
    }
    report.check(8, worst_gap <= 1e-6, format!("1000 trajectory pairs, worst gap to sampling {worst_gap:.2e} m (need <= 1e-6)"));

    // 9: roundabout adjustment.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut bad, mut moved, mut none) = (0, 0, 0);
    for _ in 0..200 {
        let (ws, c) = common::random_invalid_roundabout(&mut rng, &params);
        match (adjust_mgr(&c, &ws, &params), common::nearest_valid_cell(&c, &ws, &params)) {
            (Ok(m), Some(best)) if is_mgr_valid(&m, &ws, &params) && (m.center.distance(c.center) - best).abs() <= 1e-9 => {
                moved += 1
            }
            (Err(_), None) => none += 1,
            _ => bad += 1,
        }
    }
    report.check(
        9,
        bad == 0,
        format!("200 invalid roundabouts: {moved} moved to the nearest valid cell, {none} with no valid cell, {bad} wrong"),
    );

    // 10: byte-identical traces from the binary.
    let traces: Vec<Option<Vec<u8>>> = (0..2).map(|_| cli_trace()).collect();
    let identical = traces[0].is_some() && traces[0] == traces[1];
    report.check(10, identical, format!("repeated `run` traces identical: {identical}"));

    if report.failed == 0 {
        println!("all criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("{} criteria fail", report.failed);
        ExitCode::FAILURE
    }
}

/// Least-squares slope of `y` against `x`.
fn fit_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mx, my) = points.iter().fold((0.0, 0.0), |(a, b), &(x, y)| (a + x / n, b + y / n));
    let sxy: f64 = points.iter().map(|&(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|&(x, _)| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn cli_trace() -> Option<Vec<u8>> {
    let dir = tempfile::tempdir().ok()?;
    let status = Command::new(env!("CARGO_BIN_EXE_swarm-nav"))
        .args(["run", "--env", "circ15", "--n", "10", "--seed", "5", "--out"])
        .arg(dir.path())
        .output()
        .ok()?
        .status;
    status.code().filter(|c| *c == 0 || *c == 2)?;
    std::fs::read(dir.path().join("trace.jsonl")).ok()
}
