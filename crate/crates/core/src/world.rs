//! Workspace, robots, and random scenario generation.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{dist_obstacle_obstacle, dist_point_obstacle, Obstacle, Vec2};
use crate::params::SimParams;

pub const SCENARIO_SCHEMA: &str = "mgr-scenario/1";

/// Rejection samples allowed per scenario before giving up.
pub const PLACEMENT_BUDGET: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub width: f64,
    pub height: f64,
    pub obstacles: Vec<Obstacle>,
}

impl Workspace {
    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    /// The four walls as thin rectangles just outside the workspace.
    pub fn boundary_walls(&self) -> [Obstacle; 4] {
        let (w, h) = (self.width, self.height);
        let t = 1.0;
        [
            Obstacle::rect(Vec2::new(-t, -t), Vec2::new(w + t, 0.0)),
            Obstacle::rect(Vec2::new(-t, h), Vec2::new(w + t, h + t)),
            Obstacle::rect(Vec2::new(-t, 0.0), Vec2::new(0.0, h)),
            Obstacle::rect(Vec2::new(w, 0.0), Vec2::new(w + t, h)),
        ]
    }

    /// Distance from `p` to the nearest workspace edge.
    pub fn dist_to_boundary(&self, p: Vec2) -> f64 {
        p.x.min(p.y).min(self.width - p.x).min(self.height - p.y)
    }
}

/// Total obstacle area over workspace area. Obstacles are assumed
/// non-overlapping, as the generator guarantees.
pub fn obstacle_coverage(w: &Workspace) -> f64 {
    w.obstacles.iter().map(Obstacle::area).sum::<f64>() / w.area()
}

/// Navigation mode of a robot.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "UPPERCASE")]
pub enum NavMode {
    /// Drive straight to the goal.
    #[default]
    Goal,
    /// Orbit the given roundabout.
    Mgr { roundabout_id: u64 },
}

impl NavMode {
    pub fn roundabout(self) -> Option<u64> {
        match self {
            NavMode::Goal => None,
            NavMode::Mgr { roundabout_id } => Some(roundabout_id),
        }
    }
}

/// Something a robot can follow around: a workspace obstacle or wall by
/// index, or an arrived robot by id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Followed {
    Obstacle(usize),
    Robot(usize),
}

/// Boundary-following memory of a robot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FollowState {
    pub target: Followed,
    /// Counter-clockwise after a dead end.
    pub reversed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub id: usize,
    pub position: Vec2,
    /// Heading in `(-π, π]`.
    pub heading: f64,
    /// Last solved single-integrator velocity.
    pub velocity: Vec2,
    pub goal: Vec2,
    pub mode: NavMode,
    pub arrived: bool,
    pub arrival_time: Option<f64>,
    /// The static obstacle whose boundary the robot is following, if any.
    #[serde(default)]
    pub following: Option<FollowState>,
}

impl RobotState {
    /// A robot at rest at `start`, facing its goal.
    pub fn at_start(id: usize, start: Vec2, goal: Vec2) -> Self {
        let to_goal = goal - start;
        let heading = if to_goal.norm_sq() > 0.0 {
            to_goal.angle()
        } else {
            0.0
        };
        Self {
            id,
            position: start,
            heading,
            velocity: Vec2::ZERO,
            goal,
            mode: NavMode::Goal,
            arrived: false,
            arrival_time: None,
            following: None,
        }
    }

    pub fn dist_to_goal(&self) -> f64 {
        self.position.distance(self.goal)
    }
}

/// The four benchmark environments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Env {
    Free,
    Circ15,
    Rect15,
    Swap,
}

impl Env {
    pub const ALL: [Env; 4] = [Env::Free, Env::Circ15, Env::Rect15, Env::Swap];

    pub fn as_str(self) -> &'static str {
        match self {
            Env::Free => "free",
            Env::Circ15 => "circ15",
            Env::Rect15 => "rect15",
            Env::Swap => "swap",
        }
    }

    pub fn has_obstacles(self) -> bool {
        matches!(self, Env::Circ15 | Env::Rect15)
    }
}

impl fmt::Display for Env {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Env {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Env::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| format!("unknown environment `{s}` (expected free, circ15, rect15 or swap)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub env: Env,
    pub robot_count: usize,
    pub seed: u64,
    pub width: f64,
    pub height: f64,
    /// Target obstacle coverage for the cluttered environments.
    pub coverage: f64,
    /// Allowed deviation from `coverage`.
    pub coverage_tol: f64,
    /// Minimum free gap between any two obstacles.
    pub obstacle_gap: f64,
    /// Diameter of the circle used by [`Env::Swap`].
    pub swap_diameter: f64,
}

impl ScenarioConfig {
    pub fn new(env: Env, robot_count: usize, seed: u64) -> Self {
        Self {
            env,
            robot_count,
            seed,
            width: 16.0,
            height: 16.0,
            coverage: 0.15,
            coverage_tol: 0.01,
            obstacle_gap: 1.0,
            swap_diameter: 15.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotSpec {
    pub id: usize,
    pub start: Vec2,
    pub goal: Vec2,
}

/// A concrete problem instance, serializable so every method can be run on
/// the same instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub schema: String,
    pub env: Env,
    pub seed: u64,
    pub workspace: Dims,
    pub obstacles: Vec<Obstacle>,
    pub robots: Vec<RobotSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub width: f64,
    pub height: f64,
}

impl Scenario {
    pub fn workspace(&self) -> Workspace {
        Workspace {
            width: self.workspace.width,
            height: self.workspace.height,
            obstacles: self.obstacles.clone(),
        }
    }

    pub fn robot_states(&self) -> Vec<RobotState> {
        self.robots
            .iter()
            .map(|r| RobotState::at_start(r.id, r.start, r.goal))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, WorldError> {
        let sc: Scenario = serde_json::from_str(s).map_err(|e| WorldError::Parse(e.to_string()))?;
        if sc.schema != SCENARIO_SCHEMA {
            return Err(WorldError::SchemaMismatch {
                expected: SCENARIO_SCHEMA,
                found: sc.schema,
            });
        }
        Ok(sc)
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("scenario serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Check the separation constraints every instance must satisfy.
    /// Returns a description of the first violation.
    pub fn audit(&self, params: &SimParams) -> Result<(), String> {
        let d_safe = params.control.d_safe();
        let ws = self.workspace();
        for (kind, pts) in [
            ("start", self.robots.iter().map(|r| r.start).collect::<Vec<_>>()),
            ("goal", self.robots.iter().map(|r| r.goal).collect()),
        ] {
            for (i, &p) in pts.iter().enumerate() {
                if p.x < 0.0 || p.y < 0.0 || p.x > ws.width || p.y > ws.height {
                    return Err(format!("{kind} {i} outside the workspace"));
                }
                for (k, o) in ws.obstacles.iter().enumerate() {
                    if dist_point_obstacle(p, o) < d_safe {
                        return Err(format!("{kind} {i} within 2 r_safe of obstacle {k}"));
                    }
                }
                for (j, &q) in pts.iter().enumerate().skip(i + 1) {
                    if p.distance(q) <= d_safe {
                        return Err(format!("{kind}s {i} and {j} not separated by 2 r_safe"));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("could not place {what} within {budget} rejection samples")]
    PlacementInfeasible { what: &'static str, budget: usize },
    #[error("invalid scenario configuration: {0}")]
    InvalidConfig(String),
    #[error("scenario schema mismatch: expected {expected}, found {found}")]
    SchemaMismatch { expected: &'static str, found: String },
    #[error("malformed scenario: {0}")]
    Parse(String),
}

struct Sampler {
    rng: ChaCha8Rng,
    spent: usize,
}

impl Sampler {
    fn attempt(&mut self, what: &'static str) -> Result<(), WorldError> {
        self.spent += 1;
        if self.spent > PLACEMENT_BUDGET {
            Err(WorldError::PlacementInfeasible {
                what,
                budget: PLACEMENT_BUDGET,
            })
        } else {
            Ok(())
        }
    }
}

/// Generate a random instance. Deterministic in `cfg.seed`.
pub fn generate_scenario(cfg: &ScenarioConfig, params: &SimParams) -> Result<Scenario, WorldError> {
    if cfg.robot_count == 0 {
        return Err(WorldError::InvalidConfig("robot count must be at least 1".into()));
    }
    if !(cfg.width > 0.0 && cfg.height > 0.0) {
        return Err(WorldError::InvalidConfig("workspace dimensions must be positive".into()));
    }
    let d_safe = params.control.d_safe();
    let mut s = Sampler {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        spent: 0,
    };
    let obstacles = match cfg.env {
        Env::Circ15 | Env::Rect15 => place_obstacles(cfg, &mut s)?,
        Env::Free | Env::Swap => Vec::new(),
    };
    let robots = if cfg.env == Env::Swap {
        swap_robots(cfg, d_safe)?
    } else {
        let starts = place_points(cfg, &obstacles, d_safe, d_safe, d_safe, &mut s, "start positions")?;
        // A robot counts as arrived anywhere within arrival_eps of its goal,
        // so goals keep that much extra room for the neighbours' goals. A
        // goal also leaves room for a robot to pass between the robot
        // parked on it and any obstacle, so parked robots never seal a
        // corridor.
        let eps = params.mgr.arrival_eps;
        let goal_spacing = d_safe + 2.0 * eps;
        let goal_clearance = 2.0 * (d_safe + eps);
        let goals = place_points(cfg, &obstacles, d_safe, goal_clearance, goal_spacing, &mut s, "goal positions")?;
        starts
            .into_iter()
            .zip(goals)
            .enumerate()
            .map(|(id, (start, goal))| RobotSpec { id, start, goal })
            .collect()
    };
    Ok(Scenario {
        schema: SCENARIO_SCHEMA.to_string(),
        env: cfg.env,
        seed: cfg.seed,
        workspace: Dims {
            width: cfg.width,
            height: cfg.height,
        },
        obstacles,
        robots,
    })
}

fn place_obstacles(cfg: &ScenarioConfig, s: &mut Sampler) -> Result<Vec<Obstacle>, WorldError> {
    let area = cfg.width * cfg.height;
    let target = cfg.coverage * area;
    let ceiling = (cfg.coverage + cfg.coverage_tol) * area;
    let mut obstacles: Vec<Obstacle> = Vec::new();
    let mut covered = 0.0;
    while covered < target {
        s.attempt("obstacles")?;
        let candidate = match cfg.env {
            Env::Circ15 => {
                let r = s.rng.gen_range(0.5..=1.5);
                let c = Vec2::new(
                    s.rng.gen_range(r..=cfg.width - r),
                    s.rng.gen_range(r..=cfg.height - r),
                );
                Obstacle::circle(c, r)
            }
            _ => {
                let w = s.rng.gen_range(1.0..=3.0);
                let h = s.rng.gen_range(1.0..=3.0);
                let min = Vec2::new(
                    s.rng.gen_range(0.0..=cfg.width - w),
                    s.rng.gen_range(0.0..=cfg.height - h),
                );
                Obstacle::rect(min, min + Vec2::new(w, h))
            }
        };
        if covered + candidate.area() > ceiling {
            continue;
        }
        if obstacles
            .iter()
            .any(|o| dist_obstacle_obstacle(o, &candidate) < cfg.obstacle_gap)
        {
            continue;
        }
        covered += candidate.area();
        obstacles.push(candidate);
    }
    Ok(obstacles)
}

fn place_points(
    cfg: &ScenarioConfig,
    obstacles: &[Obstacle],
    d_safe: f64,
    clearance: f64,
    spacing: f64,
    s: &mut Sampler,
    what: &'static str,
) -> Result<Vec<Vec2>, WorldError> {
    let mut pts: Vec<Vec2> = Vec::with_capacity(cfg.robot_count);
    while pts.len() < cfg.robot_count {
        s.attempt(what)?;
        let p = Vec2::new(
            s.rng.gen_range(d_safe..=cfg.width - d_safe),
            s.rng.gen_range(d_safe..=cfg.height - d_safe),
        );
        if obstacles.iter().any(|o| dist_point_obstacle(p, o) < clearance) {
            continue;
        }
        if pts.iter().any(|q| q.distance(p) <= spacing) {
            continue;
        }
        pts.push(p);
    }
    Ok(pts)
}

fn swap_robots(cfg: &ScenarioConfig, d_safe: f64) -> Result<Vec<RobotSpec>, WorldError> {
    let n = cfg.robot_count;
    let center = Vec2::new(cfg.width / 2.0, cfg.height / 2.0);
    let radius = cfg.swap_diameter / 2.0;
    if radius + d_safe > center.x.min(center.y) {
        return Err(WorldError::InvalidConfig(format!(
            "swap circle of diameter {} does not fit the workspace",
            cfg.swap_diameter
        )));
    }
    // With N even, robot i + N/2 reuses the exactly negated direction of
    // robot i so antipodal pairs are mirror images to the last bit.
    let half = if n.is_multiple_of(2) { n / 2 } else { n };
    let robots: Vec<RobotSpec> = (0..n)
        .map(|id| {
            let dir = if id < half {
                Vec2::from_angle(TAU * id as f64 / n as f64)
            } else {
                -Vec2::from_angle(TAU * (id - half) as f64 / n as f64)
            };
            RobotSpec {
                id,
                start: center + dir * radius,
                goal: center - dir * radius,
            }
        })
        .collect();
    if n > 1 && robots[0].start.distance(robots[1].start) <= d_safe {
        return Err(WorldError::PlacementInfeasible {
            what: "swap circle positions",
            budget: 0,
        });
    }
    Ok(robots)
}
