//! Roundabout-based deadlock prevention.
//!
//! Every control period each robot runs [`step_mgr`] on its own state, the
//! states broadcast by robots in communication range, and any roundabout
//! invitations it received. A robot that predicts a deadlock with a
//! neighbor joins (or creates) a roundabout near the conflict and invites
//! the neighbor. Robots in a roundabout orbit it counterclockwise until
//! their goal direction is tangent to the orbit and the region outward is
//! clear, then return to goal-directed motion.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    dist_point_obstacle, dist_point_segment, dist_segment_obstacle, min_dist_linear_trajectories, Sector, Vec2,
};
use crate::params::SimParams;
use crate::world::{NavMode, RobotState, Workspace};

/// Slack for a neighbour sitting exactly on the barrier next to an escape
/// path.
const PATH_TOL: f64 = 1e-6;

/// Speed, as a fraction of `v_max`, below which a robot counts as stalled.
const STALL_FRACTION: f64 = 0.05;

/// A circular reference path shared by the robots orbiting it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Roundabout {
    pub id: u64,
    pub center: Vec2,
    pub radius: f64,
    pub members: BTreeSet<usize>,
}

impl Roundabout {
    pub fn new(id: u64, center: Vec2, radius: f64) -> Self {
        Self {
            id,
            center,
            radius,
            members: BTreeSet::new(),
        }
    }

    /// Number of robots currently taking the roundabout (`C.n`).
    pub fn count(&self) -> usize {
        self.members.len()
    }

    /// Obstacle clearance needed for `n` members: `C.r + k n`.
    pub fn required_clearance(&self, n: usize, params: &SimParams) -> f64 {
        self.radius + params.mgr.radius_increment * n as f64 + params.mgr.obstacle_margin
    }
}

/// Identifier a robot assigns to a roundabout it creates. Unique across
/// robots without coordination since a robot creates at most one roundabout
/// per period.
pub fn roundabout_id(period: u64, robot: usize) -> u64 {
    (period << 32) | robot as u64
}

/// What a robot broadcasts about itself every period.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateShare {
    pub sender: usize,
    pub position: Vec2,
    pub velocity: Vec2,
    pub goal: Vec2,
    pub mode: NavMode,
    pub arrived: bool,
}

impl From<&RobotState> for StateShare {
    fn from(r: &RobotState) -> Self {
        Self {
            sender: r.id,
            position: r.position,
            velocity: r.velocity,
            goal: r.goal,
            mode: r.mode,
            arrived: r.arrived,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum MgrMessage {
    StateShare(StateShare),
    Invite { sender: usize, roundabout: Roundabout },
}

impl MgrMessage {
    pub fn sender(&self) -> usize {
        match self {
            MgrMessage::StateShare(s) => s.sender,
            MgrMessage::Invite { sender, .. } => *sender,
        }
    }
}

/// A message addressed to one robot.
#[derive(Clone, Debug, PartialEq)]
pub struct Envelope {
    pub to: usize,
    pub message: MgrMessage,
}

/// Roundabout registry changes a robot asks for this period, beyond the
/// membership implied by its new mode.
#[derive(Clone, Debug, PartialEq)]
pub enum RegistryOp {
    /// Make sure this roundabout exists (created or re-created from an
    /// invitation).
    Ensure(Roundabout),
    /// A center moved by [`adjust_mgr`].
    Move { id: u64, center: Vec2 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MgrError {
    #[error("no valid roundabout center within the search region")]
    NoValidCenter,
    #[error("robot coincides with the roundabout center")]
    DegenerateCenter,
}

/// Either robot is already at the barrier distance, or their straight-line
/// extrapolations come within `k_D r_safe` over the horizon.
pub fn is_deadlock_candidate(a_i: &StateShare, a_j: &StateShare, params: &SimParams) -> bool {
    let r_safe = params.control.r_safe;
    let m = &params.mgr;
    if a_i.position.distance(a_j.position) <= 2.0 * r_safe + m.contact_tol {
        return true;
    }
    let (d_min, _) =
        min_dist_linear_trajectories(a_i.position, a_i.velocity, a_j.position, a_j.velocity, m.horizon);
    d_min <= m.k_d * r_safe
}

/// Both robots are within `ε` of their goals and neither is orbiting.
pub fn is_goal_checking(a_i: &StateShare, a_j: &StateShare, params: &SimParams) -> bool {
    let eps = params.mgr.arrival_eps;
    a_i.position.distance(a_i.goal) <= eps
        && a_j.position.distance(a_j.goal) <= eps
        && a_i.mode == NavMode::Goal
        && a_j.mode == NavMode::Goal
}

pub fn find_center(p_i: Vec2, p_j: Vec2) -> Vec2 {
    (p_i + p_j) / 2.0
}

/// Distance from `p` to the nearest obstacle or workspace wall.
pub fn clearance(p: Vec2, ws: &Workspace) -> f64 {
    ws.obstacles
        .iter()
        .map(|o| dist_point_obstacle(p, o))
        .fold(ws.dist_to_boundary(p).max(0.0), f64::min)
}

fn is_valid_with(c: &Roundabout, n: usize, ws: &Workspace, params: &SimParams) -> bool {
    clearance(c.center, ws) >= c.required_clearance(n, params)
}

/// `d_C ≥ C.r + k C.n`, with the workspace walls counted as obstacles.
pub fn is_mgr_valid(c: &Roundabout, ws: &Workspace, params: &SimParams) -> bool {
    is_valid_with(c, c.count(), ws, params)
}

/// Search square for [`adjust_mgr`]: cell size, cells per side and the
/// minimum corner.
pub fn adjust_grid(c: &Roundabout, params: &SimParams) -> (f64, usize, Vec2) {
    let cell = params.mgr.grid_cell;
    let half = params.mgr.search_radius;
    let per_side = ((2.0 * half / cell) - 1e-9).ceil().max(1.0) as usize;
    let origin = c.center - Vec2::new(half, half);
    (cell, per_side, origin)
}

/// Move the center to the closest valid grid cell, breaking distance ties
/// by the lowest row-major cell index.
pub fn adjust_mgr(c: &Roundabout, ws: &Workspace, params: &SimParams) -> Result<Roundabout, MgrError> {
    adjust_with(c, c.count(), ws, params)
}

fn adjust_with(c: &Roundabout, n: usize, ws: &Workspace, params: &SimParams) -> Result<Roundabout, MgrError> {
    let (cell, per_side, origin) = adjust_grid(c, params);
    let need = c.required_clearance(n, params);
    let mut best: Option<(f64, Vec2)> = None;
    for iy in 0..per_side {
        for ix in 0..per_side {
            let p = origin + Vec2::new((ix as f64 + 0.5) * cell, (iy as f64 + 0.5) * cell);
            let d = p.distance(c.center);
            if best.is_some_and(|(bd, _)| d >= bd - 1e-12) {
                continue;
            }
            if clearance(p, ws) >= need {
                best = Some((d, p));
            }
        }
    }
    let (_, center) = best.ok_or(MgrError::NoValidCenter)?;
    Ok(Roundabout { center, ..c.clone() })
}

/// Orbit velocity: counterclockwise tangent plus a radial correction toward
/// radius `C.r`, normalized to `v_max`.
pub fn mgr_desired_velocity(position: Vec2, c: &Roundabout, params: &SimParams) -> Result<Vec2, MgrError> {
    let v_max = params.control.v_max;
    let rel = position - c.center;
    let dist = rel.norm();
    if dist < 1e-9 {
        return Err(MgrError::DegenerateCenter);
    }
    let theta = rel.y.atan2(rel.x);
    let v_tan = Vec2::new(-theta.sin(), theta.cos()) * v_max;
    let n = c.count().max(1) as f64;
    let v_rad = (-rel / dist) * (params.mgr.radial_gain / n * (dist - c.radius) * v_max);
    let sum = v_rad + v_tan;
    Ok(sum * (v_max / sum.norm()))
}

/// The escape sector for a robot at `position` orbiting `c`.
pub fn escape_sector(position: Vec2, c: &Roundabout, params: &SimParams) -> Sector {
    let r = position.distance(c.center);
    Sector {
        center: c.center,
        inner_radius: r,
        outer_radius: r + params.mgr.sensing_range,
        mid_angle: (position - c.center).angle(),
        half_width: params.mgr.escape_half_angle,
    }
}

/// The goal direction is (nearly) orthogonal to the direction to the
/// center, and the sector outward from the robot is free of other robots
/// and obstacles.
pub fn is_escapable(
    robot: &StateShare,
    c: &Roundabout,
    neighbors: &[StateShare],
    ws: &Workspace,
    params: &SimParams,
) -> bool {
    let (Some(to_center), Some(to_goal)) = (
        (c.center - robot.position).normalized(),
        (robot.goal - robot.position).normalized(),
    ) else {
        return false;
    };
    if to_center.dot(to_goal).abs() > params.mgr.orthogonality_tol {
        return false;
    }
    let sector = escape_sector(robot.position, c, params);
    let blocked_by_robot = neighbors
        .iter()
        .filter(|n| n.sender != robot.sender)
        .any(|n| crate::geometry::sector_contains(&sector, n.position));
    if blocked_by_robot {
        return false;
    }
    // In clutter an obstacle almost always clips the outward sector of a
    // roundabout squeezed between obstacles; what matters is the path the
    // robot actually takes, so a straight run toward the goal clear of
    // obstacles and robots also counts. A robot already touching the
    // barrier does not block a path leading away from it.
    let d_safe = params.control.d_safe();
    let reach = params.mgr.sensing_range.min(robot.position.distance(robot.goal));
    let path_end = robot.position + to_goal * reach;
    let path_clear = || {
        ws.obstacles
            .iter()
            .all(|o| dist_segment_obstacle(robot.position, path_end, o) >= d_safe)
            && neighbors
                .iter()
                .filter(|n| n.sender != robot.sender)
                .all(|n| dist_point_segment(n.position, robot.position, path_end) >= d_safe - PATH_TOL)
    };
    !ws.obstacles.iter().any(|o| sector.intersects(o)) || path_clear()
}

/// Escape for a goal inside the orbit, where the goal direction can never be
/// orthogonal to the center direction: leave when the goal lies within the
/// escape half-angle of the center direction and no other robot is within
/// `2 r_safe` of the straight path to it.
pub fn is_inward_escapable(robot: &StateShare, c: &Roundabout, neighbors: &[StateShare], params: &SimParams) -> bool {
    if robot.goal.distance(c.center) >= robot.position.distance(c.center) {
        return false;
    }
    let (Some(to_center), Some(to_goal)) = (
        (c.center - robot.position).normalized(),
        (robot.goal - robot.position).normalized(),
    ) else {
        return false;
    };
    if to_center.dot(to_goal) < params.mgr.escape_half_angle.cos() {
        return false;
    }
    let d_safe = params.control.d_safe();
    !neighbors
        .iter()
        .filter(|n| n.sender != robot.sender)
        .any(|n| crate::geometry::dist_point_segment(n.position, robot.position, robot.goal) < d_safe)
}

/// Result of one roundabout-layer step for one robot.
#[derive(Clone, Debug, PartialEq)]
pub struct MgrStep {
    pub mode: NavMode,
    pub outbox: Vec<Envelope>,
    /// The robot's updated copy of the roundabouts it knows about.
    pub roundabouts: Vec<Roundabout>,
    pub ops: Vec<RegistryOp>,
}

struct Local<'a> {
    me: usize,
    mode: NavMode,
    set: Vec<Roundabout>,
    ops: Vec<RegistryOp>,
    outbox: Vec<Envelope>,
    ws: &'a Workspace,
    params: &'a SimParams,
}

impl Local<'_> {
    fn index(&self, id: u64) -> Option<usize> {
        self.set.iter().position(|c| c.id == id)
    }

    fn leave_current(&mut self) {
        if let Some(id) = self.mode.roundabout() {
            if let Some(k) = self.index(id) {
                self.set[k].members.remove(&self.me);
                if self.set[k].members.is_empty() {
                    self.set.remove(k);
                }
            }
        }
        self.mode = NavMode::Goal;
    }

    fn join(&mut self, c: Roundabout) {
        if self.mode.roundabout() != Some(c.id) {
            self.leave_current();
        }
        let k = match self.index(c.id) {
            Some(k) => k,
            None => {
                self.set.push(c);
                self.set.len() - 1
            }
        };
        self.set[k].members.insert(self.me);
        self.mode = NavMode::Mgr {
            roundabout_id: self.set[k].id,
        };
    }

    /// Adjust `c` in place if it cannot host `n` robots.
    fn validate(&mut self, c: &mut Roundabout, n: usize) {
        if !is_valid_with(c, n, self.ws, self.params) {
            if let Ok(moved) = adjust_with(c, n, self.ws, self.params) {
                c.center = moved.center;
                self.ops.push(RegistryOp::Move {
                    id: c.id,
                    center: c.center,
                });
            }
        }
    }
}

/// An arrived robot never moves again; if it sits on the orbit (nominal or
/// the outer ring the robot is actually on) the robot would stall behind it
/// for good, so it releases the roundabout.
pub fn orbit_blocked(position: Vec2, c: &Roundabout, neighbors: &[StateShare], params: &SimParams) -> bool {
    let d_safe = params.control.d_safe();
    let ring = position.distance(c.center);
    neighbors.iter().any(|s| {
        let d = s.position.distance(c.center);
        s.arrived && ((d - c.radius).abs() < d_safe || (d - ring).abs() < d_safe)
    })
}

/// An orbiting robot stalled against an obstacle barrier: its orbit runs
/// into the obstacle and cannot be followed.
pub fn pinned_to_obstacle(robot: &StateShare, ws: &Workspace, params: &SimParams) -> bool {
    clearance(robot.position, ws) <= params.control.d_safe() + params.mgr.contact_tol
        && robot.velocity.norm() <= STALL_FRACTION * params.control.v_max
}

/// No moving robot is in range: the conflict the roundabout was made for
/// is gone, and orbiting on would only keep the robot from its goal.
pub fn is_alone(neighbors: &[StateShare]) -> bool {
    neighbors.iter().all(|s| s.arrived)
}

/// One period of the deadlock-prevention layer for `robot`.
///
/// `inbox` holds the states broadcast by robots in range this period and
/// invitations sent last period. `known` are the roundabouts the robot can
/// see. `period` seeds identifiers of roundabouts created here.
pub fn step_mgr(
    robot: &RobotState,
    inbox: &[MgrMessage],
    known: &[Roundabout],
    ws: &Workspace,
    params: &SimParams,
    period: u64,
) -> MgrStep {
    let mut local = Local {
        me: robot.id,
        mode: robot.mode,
        set: known.to_vec(),
        ops: Vec::new(),
        outbox: Vec::new(),
        ws,
        params,
    };
    if robot.arrived {
        return MgrStep {
            mode: local.mode,
            outbox: local.outbox,
            roundabouts: local.set,
            ops: local.ops,
        };
    }
    let me = StateShare::from(robot);
    let mut peers: Vec<&StateShare> = inbox
        .iter()
        .filter_map(|m| match m {
            MgrMessage::StateShare(s) if s.sender != robot.id => Some(s),
            _ => None,
        })
        .collect();
    peers.sort_by_key(|s| s.sender);
    let invite = inbox
        .iter()
        .filter_map(|m| match m {
            MgrMessage::Invite { sender, roundabout } => Some((*sender, roundabout)),
            _ => None,
        })
        .min_by_key(|(sender, _)| *sender);

    if let Some((_, c)) = invite {
        let c = local
            .index(c.id)
            .map(|k| local.set[k].clone())
            .unwrap_or_else(|| c.clone());
        local.ops.push(RegistryOp::Ensure(c.clone()));
        local.join(c);
    } else {
        for peer in &peers {
            if peer.arrived || !is_deadlock_candidate(&me, peer, params) || is_goal_checking(&me, peer, params) {
                continue;
            }
            let center = find_center(me.position, peer.position);
            let nearby = local
                .set
                .iter()
                .map(|c| (c.center.distance(center), c.id))
                .filter(|(d, _)| *d <= params.mgr.center_proximity)
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut c = match nearby {
                Some((_, id)) => local.set[local.index(id).expect("listed above")].clone(),
                None => Roundabout::new(roundabout_id(period, robot.id), center, params.mgr.base_radius),
            };
            let fresh = nearby.is_none();
            let mut future = c.members.clone();
            future.insert(robot.id);
            future.insert(peer.sender);
            local.validate(&mut c, future.len());
            if let Some(k) = local.index(c.id) {
                local.set[k].center = c.center;
            }
            if fresh {
                local.ops.push(RegistryOp::Ensure(c.clone()));
            }
            local.join(c);
            let k = local.index(local.mode.roundabout().expect("just joined")).expect("joined");
            local.outbox.push(Envelope {
                to: peer.sender,
                message: MgrMessage::Invite {
                    sender: robot.id,
                    roundabout: local.set[k].clone(),
                },
            });
        }
    }

    if let Some(id) = local.mode.roundabout() {
        let own = local.index(id).map(|k| local.set[k].clone());
        let neighbors: Vec<StateShare> = peers.iter().map(|s| (*s).clone()).collect();
        let here = StateShare {
            mode: local.mode,
            ..me
        };
        let was_orbiting = robot.mode.roundabout() == Some(id);
        if own.is_some_and(|c| is_escapable(&here, &c, &neighbors, ws, params)
            || is_inward_escapable(&here, &c, &neighbors, params)
            || orbit_blocked(here.position, &c, &neighbors, params)
            || (was_orbiting && (pinned_to_obstacle(&here, ws, params) || is_alone(&neighbors)))) {
            local.leave_current();
        }
    }

    MgrStep {
        mode: local.mode,
        outbox: local.outbox,
        roundabouts: local.set,
        ops: local.ops,
    }
}
