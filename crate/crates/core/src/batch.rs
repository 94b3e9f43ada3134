//! The (environment × N × seed × method) experiment matrix.

use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::params::{default_escape_half_angle, Method, SimParams};
use crate::sim::{self, Metrics};
use crate::world::{generate_scenario, Env, ScenarioConfig};

pub const CSV_HEADER: &str =
    "env,N,method,success_rate,arrival_rate,makespan_mean,makespan_sd,mean_time_mean,mean_time_sd";

/// Environment variable capping batch parallelism.
pub const THREADS_VAR: &str = "MGR_THREADS";

#[derive(Clone, Debug)]
pub struct BatchSpec {
    pub envs: Vec<Env>,
    pub robot_counts: Vec<usize>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub params: SimParams,
    /// Fixed escape half-angle; `None` picks the per-environment default.
    pub escape_half_angle: Option<f64>,
}

impl BatchSpec {
    pub fn params_for(&self, env: Env, method: Method) -> SimParams {
        let mut p = self.params.clone();
        p.method = method;
        p.mgr.escape_half_angle = self
            .escape_half_angle
            .unwrap_or_else(|| default_escape_half_angle(env.has_obstacles()));
        p
    }
}

/// Outcome of one run of the matrix.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub env: Env,
    pub n: usize,
    pub seed: u64,
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub scenario_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub metrics: Option<Metrics>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    /// Mean per-robot compute per control period, seconds.
    #[serde(default)]
    pub compute_mean: f64,
    #[serde(default)]
    pub compute_max: f64,
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Stat> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Stat { mean, sd })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub env: Env,
    pub n: usize,
    pub method: Method,
    pub runs: usize,
    /// Percent of runs in which every robot arrived.
    pub success_rate: f64,
    /// Percent of robots, pooled over runs, that arrived.
    pub arrival_rate: f64,
    /// Over successful runs only.
    pub makespan: Option<Stat>,
    /// Over runs with at least one arrival.
    pub mean_time: Option<Stat>,
}

impl TableRow {
    pub fn csv_line(&self) -> String {
        let stat = |s: Option<Stat>| match s {
            Some(s) => (format!("{:.2}", s.mean), format!("{:.2}", s.sd)),
            None => (String::new(), String::new()),
        };
        let (mk, mk_sd) = stat(self.makespan);
        let (mt, mt_sd) = stat(self.mean_time);
        format!(
            "{},{},{},{:.2},{:.2},{mk},{mk_sd},{mt},{mt_sd}",
            self.env, self.n, self.method, self.success_rate, self.arrival_rate
        )
    }
}

pub fn to_csv(rows: &[TableRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug)]
pub struct BatchResult {
    pub runs: Vec<RunRecord>,
    pub rows: Vec<TableRow>,
}

fn run_one(spec: &BatchSpec, env: Env, n: usize, seed: u64, method: Method) -> RunRecord {
    let params = spec.params_for(env, method);
    let mut rec = RunRecord {
        env,
        n,
        seed,
        method,
        scenario_hash: None,
        metrics: None,
        error: None,
        compute_mean: 0.0,
        compute_max: 0.0,
    };
    match generate_scenario(&ScenarioConfig::new(env, n, seed), &params) {
        Ok(sc) => {
            rec.scenario_hash = Some(sc.hash());
            let out = sim::run_with(&sc, &params, |_| {});
            rec.compute_mean = out.metrics.compute.mean;
            rec.compute_max = out.metrics.compute.max;
            rec.metrics = Some(out.metrics);
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
    rec
}

fn aggregate(env: Env, n: usize, method: Method, runs: &[&RunRecord]) -> TableRow {
    let done: Vec<&Metrics> = runs.iter().filter_map(|r| r.metrics.as_ref()).collect();
    let total = runs.len().max(1) as f64;
    let successes = done.iter().filter(|m| m.success).count();
    let robots: usize = runs.iter().map(|r| r.n).sum();
    let arrived: usize = done.iter().map(|m| m.arrived).sum();
    let makespans: Vec<f64> = done.iter().filter_map(|m| m.makespan).collect();
    let mean_times: Vec<f64> = done.iter().filter_map(|m| m.mean_time).collect();
    TableRow {
        env,
        n,
        method,
        runs: runs.len(),
        success_rate: 100.0 * successes as f64 / total,
        arrival_rate: if robots == 0 {
            0.0
        } else {
            100.0 * arrived as f64 / robots as f64
        },
        makespan: Stat::of(&makespans),
        mean_time: Stat::of(&mean_times),
    }
}

/// Thread cap from [`THREADS_VAR`], if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_VAR)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Run the whole matrix. Rows come out in (env, N, method) order of the
/// spec; an empty seed list yields no rows.
pub fn run_batch(spec: &BatchSpec) -> BatchResult {
    if spec.seeds.is_empty() {
        return BatchResult {
            runs: vec![],
            rows: vec![],
        };
    }
    let mut jobs = Vec::new();
    for &env in &spec.envs {
        for &n in &spec.robot_counts {
            for &method in &spec.methods {
                for &seed in &spec.seeds {
                    jobs.push((env, n, seed, method));
                }
            }
        }
    }
    let work = || -> Vec<RunRecord> {
        jobs.par_iter()
            .map(|&(env, n, seed, method)| run_one(spec, env, n, seed, method))
            .collect()
    };
    let runs = match thread_cap().and_then(|t| rayon::ThreadPoolBuilder::new().num_threads(t).build().ok()) {
        Some(pool) => pool.install(work),
        None => work(),
    };

    let mut rows = Vec::new();
    for &env in &spec.envs {
        for &n in &spec.robot_counts {
            for &method in &spec.methods {
                let group: Vec<&RunRecord> = runs
                    .iter()
                    .filter(|r| r.env == env && r.n == n && r.method == method)
                    .collect();
                rows.push(aggregate(env, n, method, &group));
            }
        }
    }
    BatchResult { runs, rows }
}
