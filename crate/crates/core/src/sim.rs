//! Synchronous lockstep simulation.
//!
//! One period: broadcast states, deliver last period's invitations, run the
//! roundabout layer for every robot on the same snapshot, commit registry
//! changes in robot-id order, compute controls on the snapshot, integrate
//! unicycle kinematics, then book arrivals.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::control::{self, ControlStatus, Follow};
use crate::geometry::{dist_point_obstacle, Obstacle, Vec2};
use crate::mgr::{self, Envelope, MgrMessage, RegistryOp, Roundabout, StateShare};
use crate::params::{Method, SimParams};
use crate::planner::{CostField, FreeGrid};
use crate::world::{FollowState, Followed, NavMode, RobotState, Scenario, Workspace};

pub const TRACE_SCHEMA: &str = "mgr-trace/1";

/// Fraction of the turn-rate limit an orbit may use.
pub const ORBIT_TURN_MARGIN: f64 = 0.8;

/// Extra trigger distance, in metres, while a robot already follows an
/// obstacle boundary, so it does not chatter at the trigger edge.
pub const RHR_HYSTERESIS: f64 = 0.3;

/// Relative slack on `2 r_safe` accepted by the safety audit.
pub const SAFETY_SLACK: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModeTag {
    #[serde(rename = "GOAL")]
    Goal,
    #[serde(rename = "MGR")]
    Mgr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRobot {
    pub id: usize,
    pub position: Vec2,
    pub heading: f64,
    pub mode: ModeTag,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub roundabout_id: Option<u64>,
    pub si_velocity: Vec2,
    pub arrived: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRoundabout {
    pub id: u64,
    pub center: Vec2,
    pub radius: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: f64,
    pub robots: Vec<TraceRobot>,
    pub roundabouts: Vec<TraceRoundabout>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComputeStats {
    /// Mean wall time per robot per control period, seconds.
    pub mean: f64,
    /// Worst wall time of a single robot in a single period, seconds.
    pub max: f64,
    /// Mean wall time of a whole period, seconds.
    pub mean_step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub success: bool,
    pub arrival_rate: f64,
    pub makespan: Option<f64>,
    pub mean_time: Option<f64>,
    pub min_pairwise_distance: f64,
    /// Minimum robot-obstacle distance, counted per robot from the first
    /// period in which it is clear of every obstacle by `2 r_safe`.
    pub min_obstacle_distance: f64,
    pub robots: usize,
    pub arrived: usize,
    pub steps: usize,
    pub sim_time: f64,
    /// Periods in which some robot fell back to a stop after a QP failure.
    pub qp_failures: usize,
    /// Wall-clock figures; excluded from the serialized form so metrics are
    /// reproducible.
    #[serde(skip)]
    pub compute: ComputeStats,
}

impl Metrics {
    pub fn safety_violations(&self, d_safe: f64) -> bool {
        let floor = d_safe * (1.0 - SAFETY_SLACK);
        self.min_pairwise_distance < floor || self.min_obstacle_distance < floor
    }
}

/// Evidence that every read a robot made was local.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalityAudit {
    pub neighbor_reads: u64,
    pub roundabout_reads: u64,
    /// Largest distance to a robot whose state was read.
    pub max_neighbor_distance: f64,
    /// Reads outside the communication range or the roundabout locality
    /// bound.
    pub violations: u64,
}

/// Builds [`Metrics`] incrementally from trace records.
pub struct MetricsAccumulator<'a> {
    params: &'a SimParams,
    ws: &'a Workspace,
    last: Option<TraceRecord>,
    arrival: BTreeMap<usize, f64>,
    clear_of_obstacles: Vec<bool>,
    min_pair: f64,
    min_obs: f64,
    steps: usize,
}

impl<'a> MetricsAccumulator<'a> {
    pub fn new(params: &'a SimParams, ws: &'a Workspace) -> Self {
        Self {
            params,
            ws,
            last: None,
            arrival: BTreeMap::new(),
            clear_of_obstacles: Vec::new(),
            min_pair: f64::INFINITY,
            min_obs: f64::INFINITY,
            steps: 0,
        }
    }

    pub fn push(&mut self, rec: &TraceRecord) {
        let n = rec.robots.len();
        if self.clear_of_obstacles.len() < n {
            self.clear_of_obstacles.resize(n, false);
        }
        let floor = self.params.control.d_safe() * (1.0 - SAFETY_SLACK);
        for (i, a) in rec.robots.iter().enumerate() {
            for b in &rec.robots[i + 1..] {
                self.min_pair = self.min_pair.min(a.position.distance(b.position));
            }
            let d = self
                .ws
                .obstacles
                .iter()
                .map(|o| dist_point_obstacle(a.position, o))
                .fold(f64::INFINITY, f64::min);
            if !self.clear_of_obstacles[i] && d >= floor {
                self.clear_of_obstacles[i] = true;
            }
            if self.clear_of_obstacles[i] {
                self.min_obs = self.min_obs.min(d);
            }
            if a.arrived {
                self.arrival.entry(a.id).or_insert(rec.t);
            }
        }
        if self.last.is_some() {
            self.steps += 1;
        }
        self.last = Some(rec.clone());
    }

    pub fn finish(self, qp_failures: usize, compute: ComputeStats) -> Metrics {
        let robots = self.last.as_ref().map_or(0, |r| r.robots.len());
        let arrived = self.arrival.len();
        let success = robots > 0 && arrived == robots;
        let times: Vec<f64> = self.arrival.values().copied().collect();
        Metrics {
            success,
            arrival_rate: if robots == 0 { 0.0 } else { arrived as f64 / robots as f64 },
            makespan: success.then(|| times.iter().copied().fold(0.0, f64::max)),
            mean_time: (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64),
            min_pairwise_distance: self.min_pair,
            min_obstacle_distance: self.min_obs,
            robots,
            arrived,
            steps: self.steps,
            sim_time: self.last.as_ref().map_or(0.0, |r| r.t),
            qp_failures,
            compute,
        }
    }
}

/// Metrics derivable from a recorded trace.
pub fn compute_metrics(trace: &[TraceRecord], ws: &Workspace, params: &SimParams) -> Metrics {
    let mut acc = MetricsAccumulator::new(params, ws);
    for rec in trace {
        acc.push(rec);
    }
    acc.finish(0, ComputeStats::default())
}

/// Per-robot route planning over the static map. Each robot also maps the
/// arrived robots it has sensed, since those never move again.
struct Plan {
    grid: FreeGrid,
    fields: Vec<CostField>,
    known: Vec<Vec<(usize, Obstacle)>>,
}

impl Plan {
    /// Record newly sensed arrived robots and replan if there were any.
    fn learn(&mut self, i: usize, goal: Vec2, arrived: &[(usize, Vec2)]) {
        let known = &mut self.known[i];
        let before = known.len();
        for &(j, p) in arrived {
            if !known.iter().any(|&(k, _)| k == j) {
                known.push((j, Obstacle::circle(p, 0.0)));
            }
        }
        if known.len() > before {
            let extra: Vec<Obstacle> = known.iter().map(|&(_, o)| o).collect();
            self.fields[i] = self.grid.cost_to(goal, &extra);
        }
    }

    fn waypoint(&self, i: usize, from: Vec2, goal: Vec2) -> Vec2 {
        let extra: Vec<Obstacle> = self.known[i].iter().map(|&(_, o)| o).collect();
        self.grid.waypoint(&self.fields[i], from, goal, &extra)
    }
}

/// Lockstep multi-robot simulation of one scenario.
pub struct Simulation {
    params: SimParams,
    ws: Workspace,
    /// Obstacles plus the four boundary walls: everything static the
    /// controller keeps clear of.
    barriers: Vec<Obstacle>,
    /// Absent in an open workspace or when planning is switched off.
    plan: Option<Plan>,
    robots: Vec<RobotState>,
    registry: BTreeMap<u64, Roundabout>,
    invites: Vec<Vec<MgrMessage>>,
    period: u64,
    audit: LocalityAudit,
    robot_time_sum: f64,
    robot_time_max: f64,
    robot_samples: u64,
    step_time_sum: f64,
    qp_failures: usize,
}

impl Simulation {
    pub fn new(scenario: &Scenario, params: &SimParams) -> Self {
        let robots = scenario.robot_states();
        let n = robots.len();
        let ws = scenario.workspace();
        let mut barriers = ws.obstacles.clone();
        barriers.extend(ws.boundary_walls());
        let cell = params.control.plan_cell;
        let plan = (cell > 0.0 && !ws.obstacles.is_empty()).then(|| {
            let grid = FreeGrid::new(ws.width, ws.height, &barriers, cell, params.control.d_safe());
            let fields = robots.iter().map(|r| grid.cost_to(r.goal, &[])).collect();
            Plan {
                grid,
                fields,
                known: vec![Vec::new(); n],
            }
        });
        Self {
            params: params.clone(),
            barriers,
            plan,
            ws,
            robots,
            registry: BTreeMap::new(),
            invites: vec![Vec::new(); n],
            period: 0,
            audit: LocalityAudit::default(),
            robot_time_sum: 0.0,
            robot_time_max: 0.0,
            robot_samples: 0,
            step_time_sum: 0.0,
            qp_failures: 0,
        }
    }

    pub fn robots(&self) -> &[RobotState] {
        &self.robots
    }

    pub fn roundabouts(&self) -> impl Iterator<Item = &Roundabout> {
        self.registry.values()
    }

    pub fn workspace(&self) -> &Workspace {
        &self.ws
    }

    pub fn audit(&self) -> &LocalityAudit {
        &self.audit
    }

    pub fn time(&self) -> f64 {
        self.period as f64 * self.params.dt
    }

    pub fn all_arrived(&self) -> bool {
        self.robots.iter().all(|r| r.arrived)
    }

    pub fn record(&self, si: &[Vec2]) -> TraceRecord {
        TraceRecord {
            t: self.time(),
            robots: self
                .robots
                .iter()
                .zip(si)
                .map(|(r, &v)| TraceRobot {
                    id: r.id,
                    position: r.position,
                    heading: r.heading,
                    mode: match r.mode {
                        NavMode::Goal => ModeTag::Goal,
                        NavMode::Mgr { .. } => ModeTag::Mgr,
                    },
                    roundabout_id: r.mode.roundabout(),
                    si_velocity: v,
                    arrived: r.arrived,
                })
                .collect(),
            roundabouts: self
                .registry
                .values()
                .map(|c| TraceRoundabout {
                    id: c.id,
                    center: c.center,
                    radius: c.radius,
                    n: c.count(),
                })
                .collect(),
        }
    }

    fn neighbors_of(&mut self, i: usize, snapshot: &[StateShare]) -> Vec<usize> {
        let range = self.params.mgr.comm_range;
        let p = snapshot[i].position;
        let out: Vec<usize> = (0..snapshot.len())
            .filter(|&j| j != i && snapshot[j].position.distance(p) <= range)
            .collect();
        for &j in &out {
            let d = snapshot[j].position.distance(p);
            self.audit.neighbor_reads += 1;
            self.audit.max_neighbor_distance = self.audit.max_neighbor_distance.max(d);
            if d > range {
                self.audit.violations += 1;
            }
        }
        out
    }

    fn visible_roundabouts(&mut self, robot: &RobotState) -> Vec<Roundabout> {
        let m = &self.params.mgr;
        let own = robot.mode.roundabout();
        let out: Vec<Roundabout> = self
            .registry
            .values()
            .filter(|c| {
                Some(c.id) == own
                    || c.center.distance(robot.position)
                        <= m.sensing_range + c.radius + m.radius_increment * c.count() as f64
            })
            .cloned()
            .collect();
        for c in &out {
            self.audit.roundabout_reads += 1;
            let bound = m.sensing_range + c.radius + m.radius_increment * c.count() as f64;
            if Some(c.id) != own && c.center.distance(robot.position) > bound {
                self.audit.violations += 1;
            }
        }
        out
    }

    /// Advance one control period and return the single-integrator
    /// velocities that were applied.
    pub fn step(&mut self) -> Vec<Vec2> {
        let step_start = Instant::now();
        let n = self.robots.len();
        let snapshot: Vec<StateShare> = self.robots.iter().map(StateShare::from).collect();
        let mut elapsed = vec![0.0f64; n];
        let neighbor_lists: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let t0 = Instant::now();
                let list = self.neighbors_of(i, &snapshot);
                elapsed[i] += t0.elapsed().as_secs_f64();
                list
            })
            .collect();

        if self.params.method == Method::Mgr {
            self.roundabout_layer(&snapshot, &neighbor_lists, &mut elapsed);
        } else {
            for inbox in &mut self.invites {
                inbox.clear();
            }
        }

        let mut applied = vec![Vec2::ZERO; n];
        let mut cmds = vec![control::UnicycleCmd::default(); n];
        let mut following = vec![None; n];
        let mut failed = false;
        for i in 0..n {
            let robot = &self.robots[i];
            if robot.arrived {
                continue;
            }
            let t0 = Instant::now();
            let neighbors: Vec<Vec2> = neighbor_lists[i].iter().map(|&j| snapshot[j].position).collect();
            let arrived: Vec<(usize, Vec2)> = neighbor_lists[i]
                .iter()
                .filter(|&&j| snapshot[j].arrived)
                .map(|&j| (j, snapshot[j].position))
                .collect();
            if let Some(plan) = &mut self.plan {
                plan.learn(i, robot.goal, &arrived);
            }
            let robot = &self.robots[i];
            let (u_des, target, include_clf, followed) = self.desired_velocity(i, robot, &arrived);
            following[i] = followed;
            let out = control::compute_control(
                robot.position,
                robot.heading,
                target,
                u_des,
                &neighbors,
                &self.barriers,
                &self.params,
                include_clf,
            );
            elapsed[i] += t0.elapsed().as_secs_f64();
            failed |= out.status != ControlStatus::Ok;
            applied[i] = out.si_velocity;
            cmds[i] = out.cmd;
        }
        if failed {
            self.qp_failures += 1;
        }

        let dt = self.params.dt;
        self.period += 1;
        let now = self.time();
        let eps = self.params.mgr.arrival_eps;
        for (i, robot) in self.robots.iter_mut().enumerate() {
            if robot.arrived {
                continue;
            }
            let cmd = cmds[i];
            (robot.position, robot.heading) = control::integrate_unicycle(robot.position, robot.heading, cmd, dt);
            robot.velocity = applied[i];
            robot.following = following[i];
            if robot.dist_to_goal() <= eps {
                robot.arrived = true;
                robot.arrival_time = Some(now);
                robot.velocity = Vec2::ZERO;
                robot.mode = NavMode::Goal;
                applied[i] = Vec2::ZERO;
            }
        }
        self.refresh_membership();

        for &e in &elapsed {
            self.robot_time_sum += e;
            self.robot_time_max = self.robot_time_max.max(e);
        }
        self.robot_samples += n as u64;
        self.step_time_sum += step_start.elapsed().as_secs_f64();
        applied
    }

    /// Desired velocity, the point the goal CLF pulls toward, whether the
    /// CLF applies, and the obstacle being followed.
    ///
    /// `arrived` holds the positions of arrived robots in range; they never
    /// move again, so obstacle following treats them as point obstacles.
    fn desired_velocity(
        &self,
        i: usize,
        robot: &RobotState,
        arrived: &[(usize, Vec2)],
    ) -> (Vec2, Vec2, bool, Option<FollowState>) {
        match robot.mode {
            NavMode::Mgr { roundabout_id } => {
                let c = &self.params.control;
                let u = self
                    .registry
                    .get(&roundabout_id)
                    .and_then(|rb| {
                        // The point that tracks single-integrator commands is
                        // the look-ahead point; evaluating the orbit field at
                        // the body center makes it spiral outward.
                        let tracked = robot.position + Vec2::from_angle(robot.heading) * c.lookahead;
                        let u = mgr::mgr_desired_velocity(tracked, rb, &self.params).ok()?;
                        // A unicycle cannot hold a circle of radius r faster
                        // than omega_max * r; keep some turning margin.
                        Some(u.clamp_norm(ORBIT_TURN_MARGIN * c.omega_max * rb.radius))
                    })
                    .unwrap_or(Vec2::new(c.v_max, 0.0));
                (u, robot.goal, false, None)
            }
            NavMode::Goal => {
                if let Some(plan) = &self.plan {
                    // The plan routes around everything static the robot
                    // knows of, so obstacle following has nothing to add.
                    let target = plan.waypoint(i, robot.position, robot.goal);
                    // Head for the waypoint at the speed the real goal calls for.
                    let speed = control::nominal_goal_velocity(robot.position, robot.goal, &self.params).norm();
                    let u = (target - robot.position).normalized().unwrap_or(Vec2::ZERO) * speed;
                    return (u, target, true, None);
                }
                let nominal = control::nominal_goal_velocity(robot.position, robot.goal, &self.params);
                let mut statics = self.barriers.clone();
                statics.extend(arrived.iter().map(|&(_, p)| Obstacle::circle(p, 0.0)));
                let key = |k: usize| match k.checked_sub(self.barriers.len()) {
                    None => Followed::Obstacle(k),
                    Some(a) => Followed::Robot(arrived[a].0),
                };
                let prefer = robot.following.and_then(|f| {
                    (0..statics.len()).find(|&k| key(k) == f.target).map(|index| Follow {
                        index,
                        reversed: f.reversed,
                    })
                });
                let mut trigger = self.params.control.rhr_trigger;
                if robot.following.is_some() {
                    trigger += RHR_HYSTERESIS;
                }
                let (u, follow) = control::right_hand_rule_within(
                    nominal,
                    robot.position,
                    robot.goal,
                    &statics,
                    &self.params,
                    trigger,
                    prefer,
                );
                let state = follow.map(|f| FollowState {
                    target: key(f.index),
                    reversed: f.reversed,
                });
                (u, robot.goal, follow.is_none(), state)
            }
        }
    }

    fn roundabout_layer(&mut self, snapshot: &[StateShare], neighbor_lists: &[Vec<usize>], elapsed: &mut [f64]) {
        let n = self.robots.len();
        let delivered = std::mem::replace(&mut self.invites, vec![Vec::new(); n]);
        let mut steps = Vec::with_capacity(n);
        for i in 0..n {
            let t0 = Instant::now();
            let mut inbox: Vec<MgrMessage> = neighbor_lists[i]
                .iter()
                .map(|&j| MgrMessage::StateShare(snapshot[j].clone()))
                .collect();
            inbox.extend(delivered[i].iter().cloned());
            let robot = self.robots[i].clone();
            let known = self.visible_roundabouts(&robot);
            let out = mgr::step_mgr(&robot, &inbox, &known, &self.ws, &self.params, self.period);
            elapsed[i] += t0.elapsed().as_secs_f64();
            steps.push(out);
        }

        // Serial commit in robot-id order.
        let proximity = self.params.mgr.center_proximity;
        let mut alias: BTreeMap<u64, u64> = BTreeMap::new();
        let mut created: Vec<u64> = Vec::new();
        let mut moved: BTreeSet<u64> = BTreeSet::new();
        let resolve = |alias: &BTreeMap<u64, u64>, id: u64| *alias.get(&id).unwrap_or(&id);
        for step in &steps {
            for op in &step.ops {
                match op {
                    RegistryOp::Ensure(c) => {
                        let id = resolve(&alias, c.id);
                        if self.registry.contains_key(&id) {
                            continue;
                        }
                        let twin = created
                            .iter()
                            .copied()
                            .find(|k| self.registry[k].center.distance(c.center) <= proximity);
                        match twin {
                            Some(k) => {
                                alias.insert(c.id, k);
                            }
                            None => {
                                self.registry
                                    .insert(id, Roundabout::new(id, c.center, c.radius));
                                created.push(id);
                            }
                        }
                    }
                    RegistryOp::Move { id, center } => {
                        let id = resolve(&alias, *id);
                        if let Some(c) = self.registry.get_mut(&id) {
                            if moved.insert(id) {
                                c.center = *center;
                            }
                        }
                    }
                }
            }
        }
        for (robot, step) in self.robots.iter_mut().zip(&steps) {
            robot.mode = match step.mode {
                NavMode::Mgr { roundabout_id } => {
                    let id = resolve(&alias, roundabout_id);
                    if self.registry.contains_key(&id) {
                        NavMode::Mgr { roundabout_id: id }
                    } else {
                        NavMode::Goal
                    }
                }
                NavMode::Goal => NavMode::Goal,
            };
        }
        self.refresh_membership();

        for step in steps {
            for Envelope { to, message } in step.outbox {
                if let MgrMessage::Invite { sender, roundabout } = message {
                    let id = resolve(&alias, roundabout.id);
                    let roundabout = self.registry.get(&id).cloned().unwrap_or(Roundabout { id, ..roundabout });
                    self.invites[to].push(MgrMessage::Invite { sender, roundabout });
                }
            }
        }
    }

    /// Recompute `C.n` from robot modes and drop empty roundabouts.
    fn refresh_membership(&mut self) {
        for c in self.registry.values_mut() {
            c.members.clear();
        }
        for r in &mut self.robots {
            if let Some(id) = r.mode.roundabout() {
                match self.registry.get_mut(&id) {
                    Some(c) => {
                        c.members.insert(r.id);
                    }
                    None => r.mode = NavMode::Goal,
                }
            }
        }
        self.registry.retain(|_, c| !c.members.is_empty());
    }

    pub fn compute_stats(&self) -> ComputeStats {
        ComputeStats {
            mean: if self.robot_samples == 0 {
                0.0
            } else {
                self.robot_time_sum / self.robot_samples as f64
            },
            max: self.robot_time_max,
            mean_step: if self.period == 0 {
                0.0
            } else {
                self.step_time_sum / self.period as f64
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub metrics: Metrics,
    pub audit: LocalityAudit,
}

/// Run a scenario to completion, handing every trace record to `sink`.
pub fn run_with(scenario: &Scenario, params: &SimParams, mut sink: impl FnMut(&TraceRecord)) -> RunOutput {
    let mut sim = Simulation::new(scenario, params);
    let ws = sim.workspace().clone();
    let mut acc = MetricsAccumulator::new(params, &ws);
    let initial = sim.record(&vec![Vec2::ZERO; sim.robots().len()]);
    acc.push(&initial);
    sink(&initial);
    let max_steps = (params.time_limit / params.dt).round() as u64;
    while !sim.all_arrived() && sim.period < max_steps {
        let applied = sim.step();
        let rec = sim.record(&applied);
        acc.push(&rec);
        sink(&rec);
    }
    let stats = sim.compute_stats();
    RunOutput {
        metrics: acc.finish(sim.qp_failures, stats),
        audit: sim.audit.clone(),
    }
}

/// Run a scenario and keep the whole trace.
pub fn run(scenario: &Scenario, params: &SimParams) -> (Metrics, Vec<TraceRecord>) {
    let mut trace = Vec::new();
    let out = run_with(scenario, params, |r| trace.push(r.clone()));
    (out.metrics, trace)
}
