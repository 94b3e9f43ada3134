//! Command-line entry points.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::batch::{self, BatchSpec};
use crate::params::{default_escape_half_angle, Method, ParamError, SimParams};
use crate::sim::{self, Metrics, TraceRecord, TRACE_SCHEMA};
use crate::world::{generate_scenario, Env, Scenario, ScenarioConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_FAILED_RUN: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "swarm-nav", version, about = "Decentralized multi-robot navigation simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate and run one scenario.
    Run(RunArgs),
    /// Run the environment × N × seed × method matrix and tabulate it.
    Batch(BatchArgs),
    /// Re-run a stored scenario file.
    Replay(ReplayArgs),
    /// Export positions from a trace for external plotting.
    PlotData(PlotArgs),
}

/// Overrides for every simulation parameter. Unset flags keep the value
/// from `--config` or the built-in default shown in brackets.
#[derive(Args, Debug, Clone, Default)]
pub struct ParamArgs {
    /// Control period, s [default: 0.05]
    #[arg(long)]
    pub dt: Option<f64>,
    /// Simulated time limit, s [default: 120]
    #[arg(long)]
    pub time_limit: Option<f64>,
    /// Robot safety radius r_safe, m [default: 0.22]
    #[arg(long)]
    pub r_safe: Option<f64>,
    /// CLF decrease gain [default: 1]
    #[arg(long)]
    pub clf_gain: Option<f64>,
    /// CBF gain [default: 5]
    #[arg(long)]
    pub cbf_gain: Option<f64>,
    /// Maximum speed, m/s [default: 0.8]
    #[arg(long)]
    pub v_max: Option<f64>,
    /// Maximum turn rate, rad/s [default: 1.5708]
    #[arg(long)]
    pub omega_max: Option<f64>,
    /// Unicycle mapping look-ahead, m [default: 0.05]
    #[arg(long)]
    pub lookahead: Option<f64>,
    /// Nominal goal-seeking gain, 1/s [default: 1]
    #[arg(long)]
    pub goal_gain: Option<f64>,
    /// Obstacle-following trigger distance beyond 2 r_safe, m [default: 0.3]
    #[arg(long)]
    pub rhr_trigger: Option<f64>,
    /// Waypoint planning grid cell, m; 0 heads straight for the goal [default: 0.1]
    #[arg(long)]
    pub plan_cell: Option<f64>,
    /// Deadlock prediction horizon T, s [default: 1]
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Deadlock prediction threshold k_D in [1, 2) [default: 1]
    #[arg(long)]
    pub k_d: Option<f64>,
    /// Roundabout reuse distance delta_c, m [default: 2]
    #[arg(long)]
    pub center_proximity: Option<f64>,
    /// Roundabout radius C.r, m [default: 0.3]
    #[arg(long)]
    pub base_radius: Option<f64>,
    /// Communication range, m [default: 1]
    #[arg(long)]
    pub comm_range: Option<f64>,
    /// Sensing range (must equal comm-range), m [default: 1]
    #[arg(long)]
    pub sensing_range: Option<f64>,
    /// Clearance per roundabout member k, m [default: 0.1]
    #[arg(long)]
    pub radius_increment: Option<f64>,
    /// Radial orbit gain k_p in (0, 1] [default: 0.05]
    #[arg(long)]
    pub radial_gain: Option<f64>,
    /// Escape sector half-angle, rad [default: pi/6 with obstacles, pi/12 otherwise]
    #[arg(long)]
    pub escape_half_angle: Option<f64>,
    /// Arrival tolerance, below r-safe, m [default: 0.1]
    #[arg(long)]
    pub arrival_eps: Option<f64>,
    /// Roundabout center search grid cell, m [default: 0.1]
    #[arg(long)]
    pub grid_cell: Option<f64>,
    /// Roundabout center search half-width, m [default: 3]
    #[arg(long)]
    pub search_radius: Option<f64>,
    /// Contact band above 2 r_safe, m [default: 0.01]
    #[arg(long)]
    pub contact_tol: Option<f64>,
    /// Escape orthogonality tolerance on |cos| [default: 0.1]
    #[arg(long)]
    pub orthogonality_tol: Option<f64>,
    /// Extra obstacle clearance of roundabout centers, m [default: 0.44]
    #[arg(long)]
    pub obstacle_margin: Option<f64>,
}

impl ParamArgs {
    pub fn apply(&self, p: &mut SimParams) {
        fn set<T: Copy>(dst: &mut T, src: Option<T>) {
            if let Some(v) = src {
                *dst = v;
            }
        }
        set(&mut p.dt, self.dt);
        set(&mut p.time_limit, self.time_limit);
        let c = &mut p.control;
        set(&mut c.r_safe, self.r_safe);
        set(&mut c.clf_gain, self.clf_gain);
        set(&mut c.cbf_gain, self.cbf_gain);
        set(&mut c.v_max, self.v_max);
        set(&mut c.omega_max, self.omega_max);
        set(&mut c.lookahead, self.lookahead);
        set(&mut c.goal_gain, self.goal_gain);
        set(&mut c.rhr_trigger, self.rhr_trigger);
        set(&mut c.plan_cell, self.plan_cell);
        let m = &mut p.mgr;
        set(&mut m.horizon, self.horizon);
        set(&mut m.k_d, self.k_d);
        set(&mut m.center_proximity, self.center_proximity);
        set(&mut m.base_radius, self.base_radius);
        set(&mut m.comm_range, self.comm_range);
        set(&mut m.sensing_range, self.sensing_range);
        set(&mut m.radius_increment, self.radius_increment);
        set(&mut m.radial_gain, self.radial_gain);
        set(&mut m.escape_half_angle, self.escape_half_angle);
        set(&mut m.arrival_eps, self.arrival_eps);
        set(&mut m.grid_cell, self.grid_cell);
        set(&mut m.search_radius, self.search_radius);
        set(&mut m.contact_tol, self.contact_tol);
        set(&mut m.orthogonality_tol, self.orthogonality_tol);
        set(&mut m.obstacle_margin, self.obstacle_margin);
    }
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Environment: free, circ15, rect15 or swap [default: free]
    #[arg(long)]
    pub env: Option<Env>,
    /// Number of robots [default: 10]
    #[arg(long)]
    pub n: Option<usize>,
    /// Scenario seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Navigation method: mgr or clf-cbf [default: mgr]
    #[arg(long)]
    pub method: Option<Method>,
    /// Effective-config file from an earlier run; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[command(flatten)]
    pub params: ParamArgs,
}

#[derive(Args, Debug)]
pub struct BatchArgs {
    /// Comma-separated environments [default: free,circ15,rect15,swap]
    #[arg(long, value_delimiter = ',')]
    pub env: Vec<Env>,
    /// Comma-separated robot counts [default: 20]
    #[arg(long, value_delimiter = ',')]
    pub n: Vec<usize>,
    /// Number of seeds; runs use seeds 0..SEEDS
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Comma-separated methods [default: mgr]
    #[arg(long = "method", value_delimiter = ',')]
    pub methods: Vec<Method>,
    /// Output directory
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Parameter file (the `params` object of an effective config).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub params: ParamArgs,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    /// Scenario JSON written by `run`.
    pub scenario: PathBuf,
    /// Navigation method: mgr or clf-cbf [default: mgr]
    #[arg(long)]
    pub method: Option<Method>,
    /// Effective-config file whose parameters to reuse.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[command(flatten)]
    pub params: ParamArgs,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Trace file (JSON lines) written by `run` or `replay`.
    pub trace: PathBuf,
    /// Output directory for positions.csv and roundabouts.csv
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

/// Fully resolved configuration of a single run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: Env,
    pub n: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub params: SimParams,
}

impl RunConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, CliError> {
        serde_json::from_str(s).map_err(|e| CliError::Config(format!("bad config file: {e}")))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn param_error(e: ParamError) -> CliError {
    CliError::Config(format!(
        "invalid --{} = {}: {}",
        e.name, e.value, e.reason
    ))
}

/// Parameters for `env`: config file (if any), environment default for the
/// escape half-angle, then flag overrides; validated.
fn resolve_params(
    base: Option<SimParams>,
    env: Env,
    method: Option<Method>,
    flags: &ParamArgs,
) -> Result<SimParams, CliError> {
    let mut p = base.unwrap_or_else(|| {
        let mut p = SimParams::default();
        p.mgr.escape_half_angle = default_escape_half_angle(env.has_obstacles());
        p
    });
    if let Some(m) = method {
        p.method = m;
    }
    flags.apply(&mut p);
    p.validate().map_err(param_error)?;
    Ok(p)
}

pub fn resolve_run_config(args: &RunArgs) -> Result<RunConfig, CliError> {
    let base = args.config.as_deref().map(|p| read(p).and_then(|s| RunConfig::from_json(&s))).transpose()?;
    let env = args.env.or(base.as_ref().map(|b| b.env)).unwrap_or(Env::Free);
    let n = args.n.or(base.as_ref().map(|b| b.n)).unwrap_or(10);
    let seed = args.seed.or(base.as_ref().map(|b| b.seed)).unwrap_or(0);
    let params = resolve_params(base.map(|b| b.params), env, args.method, &args.params)?;
    Ok(RunConfig {
        env,
        n,
        seed,
        out: args.out.clone(),
        params,
    })
}

/// Writes a trace as JSON lines with a schema header.
pub struct TraceWriter<W: Write> {
    out: W,
    error: Option<io::Error>,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W) -> io::Result<Self> {
        writeln!(out, "{}", serde_json::json!({ "schema": TRACE_SCHEMA }))?;
        Ok(Self { out, error: None })
    }

    pub fn push(&mut self, rec: &TraceRecord) {
        if self.error.is_some() {
            return;
        }
        let res = serde_json::to_writer(&mut self.out, rec)
            .map_err(io::Error::from)
            .and_then(|_| self.out.write_all(b"\n"));
        if let Err(e) = res {
            self.error = Some(e);
        }
    }

    pub fn finish(mut self) -> io::Result<()> {
        match self.error.take() {
            Some(e) => Err(e),
            None => self.out.flush(),
        }
    }
}

/// Reads a trace written by [`TraceWriter`].
pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>, CliError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .transpose()
        .map_err(io_err(path))?
        .ok_or_else(|| CliError::Config(format!("{}: empty trace", path.display())))?;
    let header: serde_json::Value =
        serde_json::from_str(&header).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if header.get("schema").and_then(|s| s.as_str()) != Some(TRACE_SCHEMA) {
        return Err(CliError::Config(format!(
            "{}: expected trace schema {TRACE_SCHEMA}, found {}",
            path.display(),
            header.get("schema").unwrap_or(&serde_json::Value::Null)
        )));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?);
    }
    Ok(out)
}

fn summary(m: &Metrics) -> String {
    let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.2} s"));
    format!(
        "success: {}\narrived: {}/{} ({:.1}%)\nmakespan: {}\nmean time: {}\nmin pairwise distance: {:.4} m\nmin obstacle distance: {}\ncompute per robot-step: mean {:.1} us, max {:.1} us",
        m.success,
        m.arrived,
        m.robots,
        100.0 * m.arrival_rate,
        opt(m.makespan),
        opt(m.mean_time),
        m.min_pairwise_distance,
        if m.min_obstacle_distance.is_finite() {
            format!("{:.4} m", m.min_obstacle_distance)
        } else {
            "-".into()
        },
        m.compute.mean * 1e6,
        m.compute.max * 1e6,
    )
}

/// Simulate `scenario` and write its artifacts into `out`.
fn simulate_to_dir(scenario: &Scenario, cfg: &RunConfig) -> Result<Metrics, CliError> {
    let out = &cfg.out;
    ensure_dir(out)?;
    write(&out.join("scenario.json"), &scenario.to_json())?;
    write(&out.join("config.json"), &cfg.to_json())?;
    let trace_path = out.join("trace.jsonl");
    let file = File::create(&trace_path).map_err(io_err(&trace_path))?;
    let mut tw = TraceWriter::new(BufWriter::new(file)).map_err(io_err(&trace_path))?;
    let run = sim::run_with(scenario, &cfg.params, |r| tw.push(r));
    tw.finish().map_err(io_err(&trace_path))?;
    let m = run.metrics;
    let metrics = serde_json::to_string_pretty(&m).expect("metrics serialize");
    write(&out.join("metrics.json"), &metrics)?;
    let timing = serde_json::json!({ "compute": m.compute, "locality": run.audit });
    write(&out.join("timing.json"), &serde_json::to_string_pretty(&timing).expect("timing serializes"))?;
    Ok(m)
}

pub fn cmd_run(args: &RunArgs) -> Result<i32, CliError> {
    let cfg = resolve_run_config(args)?;
    let scenario = generate_scenario(&ScenarioConfig::new(cfg.env, cfg.n, cfg.seed), &cfg.params)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let m = simulate_to_dir(&scenario, &cfg)?;
    println!("scenario: {} (sha256 {})", cfg.env, scenario.hash());
    println!("{}", summary(&m));
    Ok(if m.success { EXIT_OK } else { EXIT_FAILED_RUN })
}

pub fn cmd_replay(args: &ReplayArgs) -> Result<i32, CliError> {
    let scenario = Scenario::from_json(&read(&args.scenario)?).map_err(|e| CliError::Config(e.to_string()))?;
    let base = args.config.as_deref().map(|p| read(p).and_then(|s| RunConfig::from_json(&s))).transpose()?;
    let params = resolve_params(base.map(|b| b.params), scenario.env, args.method, &args.params)?;
    scenario
        .audit(&params)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.scenario.display())))?;
    let cfg = RunConfig {
        env: scenario.env,
        n: scenario.robots.len(),
        seed: scenario.seed,
        out: args.out.clone(),
        params,
    };
    let m = simulate_to_dir(&scenario, &cfg)?;
    println!("scenario: {} (sha256 {})", cfg.env, scenario.hash());
    println!("{}", summary(&m));
    Ok(if m.success { EXIT_OK } else { EXIT_FAILED_RUN })
}

pub fn cmd_batch(args: &BatchArgs) -> Result<i32, CliError> {
    let base = args
        .config
        .as_deref()
        .map(|p| {
            read(p).and_then(|s| {
                serde_json::from_str::<SimParams>(&s)
                    .or_else(|_| RunConfig::from_json(&s).map(|c| c.params))
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
            })
        })
        .transpose()?;
    let mut params = base.unwrap_or_default();
    args.params.apply(&mut params);
    params.validate().map_err(param_error)?;
    let spec = BatchSpec {
        envs: if args.env.is_empty() { Env::ALL.to_vec() } else { args.env.clone() },
        robot_counts: if args.n.is_empty() { vec![20] } else { args.n.clone() },
        seeds: (0..args.seeds).collect(),
        methods: if args.methods.is_empty() {
            vec![Method::Mgr]
        } else {
            args.methods.clone()
        },
        params,
        escape_half_angle: args.params.escape_half_angle,
    };
    let res = batch::run_batch(&spec);
    ensure_dir(&args.out)?;
    let csv = batch::to_csv(&res.rows);
    write(&args.out.join("table.csv"), &csv)?;
    let mut runs = String::new();
    for r in &res.runs {
        runs.push_str(&serde_json::to_string(r).expect("run record serializes"));
        runs.push('\n');
    }
    write(&args.out.join("runs.jsonl"), &runs)?;
    print!("{csv}");
    for r in res.runs.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "warning: {} N={} seed={} {}: {}",
            r.env,
            r.n,
            r.seed,
            r.method,
            r.error.as_deref().unwrap_or_default()
        );
    }
    Ok(EXIT_OK)
}

pub fn cmd_plot_data(args: &PlotArgs) -> Result<i32, CliError> {
    let trace = read_trace(&args.trace)?;
    ensure_dir(&args.out)?;
    let mut pos = String::from("t,id,x,y,heading,mode,roundabout_id,arrived\n");
    let mut rb = String::from("t,id,cx,cy,radius,n\n");
    for rec in &trace {
        for r in &rec.robots {
            let mode = match r.mode {
                sim::ModeTag::Goal => "GOAL",
                sim::ModeTag::Mgr => "MGR",
            };
            let id = r.roundabout_id.map(|i| i.to_string()).unwrap_or_default();
            pos.push_str(&format!(
                "{},{},{},{},{},{mode},{id},{}\n",
                rec.t, r.id, r.position.x, r.position.y, r.heading, r.arrived
            ));
        }
        for c in &rec.roundabouts {
            rb.push_str(&format!("{},{},{},{},{},{}\n", rec.t, c.id, c.center.x, c.center.y, c.radius, c.n));
        }
    }
    write(&args.out.join("positions.csv"), &pos)?;
    write(&args.out.join("roundabouts.csv"), &rb)?;
    println!("{} records -> {}", trace.len(), args.out.display());
    Ok(EXIT_OK)
}

/// Parse `argv` and dispatch; returns the process exit code.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let res = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Batch(a) => cmd_batch(a),
        Command::Replay(a) => cmd_replay(a),
        Command::PlotData(a) => cmd_plot_data(a),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}
