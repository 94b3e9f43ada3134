//! Per-robot control synthesis.
//!
//! Velocities are computed for a single integrator `ṗ = u` by a CLF-CBF
//! quadratic program over `(u_x, u_y, δ)`, then mapped to unicycle commands
//! through a look-ahead point. The QP is
//!
//! ```text
//! min  ‖u‖² − 2 u_desᵀ u + ½ δ²
//! s.t. 2 (p − g)ᵀ u + λ V(p)          ≤ δ        (CLF, GOAL mode only)
//!      −2 (p_i − p_j)ᵀ u              ≤ β h_ij   (one per neighbor)
//!      −2 (p_i − q_o)ᵀ u              ≤ β h_io   (one per nearby obstacle)
//!      |u_x|, |u_y| ≤ v_max,  δ ≥ 0
//! ```
//!
//! with `V = ‖p − g‖²`, `h_ij = ‖p_i − p_j‖² − d_safe²` and `q_o` the point
//! of obstacle `o` closest to `p_i`.

use serde::{Deserialize, Serialize};

use crate::geometry::{dist_point_obstacle, dist_segment_obstacle, normalize_angle, Obstacle, Vec2};
use crate::params::{ControlParams, SimParams};
use crate::qp::{self, QpError, QpProblem};

/// Cost curvature on `(u_x, u_y, δ)`.
pub const HESSIAN: [f64; 3] = [2.0, 2.0, 1.0];

/// Distance beyond `d_safe` at which a second obstacle closes a gap.
const CORNER_TOL: f64 = 0.05;
/// A tangent running into the next obstacle at less than this cosine of
/// head-on slides along it under the barrier constraint; only steeper ones
/// stall in the corner.
const CORNER_COS: f64 = 0.7;

/// Clearance beyond `d_safe` the goal path needs before a followed obstacle
/// is released.
const LEAVE_MARGIN: f64 = 0.1;

/// Absolute slack on barrier rows in the speed filter.
const FILTER_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UnicycleCmd {
    /// Linear velocity, m/s.
    pub v: f64,
    /// Angular velocity, rad/s.
    pub omega: f64,
}

/// Pairwise barrier value `‖p_i − p_j‖² − d_safe²`.
pub fn pairwise_h(p_i: Vec2, p_j: Vec2, params: &ControlParams) -> f64 {
    let d = params.d_safe();
    (p_i - p_j).norm_sq() - d * d
}

/// Saturated proportional law toward the goal; zero inside the arrival
/// tolerance.
pub fn nominal_goal_velocity(position: Vec2, goal: Vec2, params: &SimParams) -> Vec2 {
    let err = goal - position;
    if err.norm() <= params.mgr.arrival_eps {
        return Vec2::ZERO;
    }
    (err * params.control.goal_gain).clamp_norm(params.control.v_max)
}

/// Assemble the CLF-CBF program for one robot.
///
/// `neighbors` are positions of robots within communication range;
/// obstacles farther than the sensing range are skipped. When
/// `include_clf` is set the CLF row is the first row of the result.
pub fn build_qp(
    position: Vec2,
    goal: Vec2,
    u_des: Vec2,
    neighbors: &[Vec2],
    obstacles: &[Obstacle],
    params: &SimParams,
    include_clf: bool,
) -> QpProblem {
    let c = &params.control;
    let v_max = c.v_max;
    let mut p = QpProblem::new(HESSIAN, [-2.0 * u_des.x, -2.0 * u_des.y, 0.0])
        .with_bounds([-v_max, -v_max, 0.0], [v_max, v_max, f64::INFINITY]);
    if include_clf {
        let e = position - goal;
        let v = e.norm_sq();
        p.push_row([2.0 * e.x, 2.0 * e.y, -1.0], -c.clf_gain * v);
    }
    for &q in neighbors {
        let d = position - q;
        p.push_row([-2.0 * d.x, -2.0 * d.y, 0.0], c.cbf_gain * pairwise_h(position, q, c));
    }
    let d_safe = c.d_safe();
    for obs in obstacles {
        let q = obs.closest_point(position);
        let d = position - q;
        if d.norm() > params.mgr.sensing_range {
            continue;
        }
        let h = d.norm_sq() - d_safe * d_safe;
        p.push_row([-2.0 * d.x, -2.0 * d.y, 0.0], c.cbf_gain * h);
    }
    p
}

/// Right-hand rule for static obstacles: when the nearest obstacle within
/// `d_safe + rhr_trigger` lies across the straight path to the goal, steer
/// along the boundary tangent that circles the obstacle clockwise.
///
/// Returns the (possibly replaced) desired velocity and whether the rule
/// engaged.
pub fn right_hand_rule_bias(
    u_des: Vec2,
    position: Vec2,
    goal: Vec2,
    obstacles: &[Obstacle],
    params: &SimParams,
) -> (Vec2, bool) {
    let (u, follow) = right_hand_rule_within(u_des, position, goal, obstacles, params, params.control.rhr_trigger, None);
    (u, follow.is_some())
}

/// Which obstacle a robot follows and in which direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Follow {
    /// Index into the obstacle list.
    pub index: usize,
    /// Reversed to counter-clockwise after running into a dead end.
    pub reversed: bool,
}

/// [`right_hand_rule_bias`] with memory: an explicit trigger distance beyond
/// `d_safe` (larger while already following, for hysteresis) and what was
/// followed last period, which is kept while that obstacle still lies
/// across the goal direction. When the tangent runs head-on into another
/// obstacle the robot is touching, the gap is too narrow to pass and the
/// direction reverses, as a bug-style boundary follower does at a dead end.
pub fn right_hand_rule_within(
    u_des: Vec2,
    position: Vec2,
    goal: Vec2,
    obstacles: &[Obstacle],
    params: &SimParams,
    trigger: f64,
    prefer: Option<Follow>,
) -> (Vec2, Option<Follow>) {
    let c = &params.control;
    let d_safe = c.d_safe();
    let Some(dir) = u_des.normalized() else {
        return (u_des, None);
    };
    let mut close: Vec<(f64, usize, Vec2)> = obstacles
        .iter()
        .enumerate()
        .filter_map(|(k, o)| {
            let d = dist_point_obstacle(position, o);
            let normal = (position - o.closest_point(position)).normalized()?;
            (d <= d_safe + trigger).then_some((d, k, normal))
        })
        .collect();
    close.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    // An obstacle blocks when u_des pushes into it and heading straight for
    // the goal cuts into its inflated boundary.
    let reach = position.distance(goal);
    let blocks = |k: usize, normal: Vec2, margin: f64| {
        u_des.dot(normal) < 0.0
            && dist_segment_obstacle(position, position + dir * reach, &obstacles[k]) < d_safe + margin
    };
    // The followed obstacle is released only once the path clears it by a
    // margin, so a path grazing it does not toggle the rule every period.
    let kept = prefer.and_then(|f| {
        close
            .iter()
            .position(|&(_, k, normal)| k == f.index && blocks(k, normal, LEAVE_MARGIN))
            .map(|i| (i, f.reversed))
    });
    // Otherwise the nearest blocking obstacle.
    let chosen = kept.or_else(|| {
        close
            .iter()
            .position(|&(_, k, normal)| blocks(k, normal, 0.0))
            .map(|i| (i, false))
    });
    let Some((first, mut reversed)) = chosen else {
        return (u_des, None);
    };
    let normal = close[first].2;
    let tangent_of = |reversed: bool| {
        if reversed {
            Vec2::new(-normal.y, normal.x)
        } else {
            Vec2::new(normal.y, -normal.x)
        }
    };
    // A dead end: the tangent runs head-on into another obstacle in
    // contact, or, with both in contact, sliding along the other one still
    // pushes into the first (a wedge narrower than the robot).
    let first_touching = close[first].0 <= d_safe + CORNER_TOL;
    let dead_end = |t: Vec2| {
        close.iter().enumerate().any(|(i, &(d, _, n))| {
            let into = t.dot(n);
            if i == first || d > d_safe + CORNER_TOL || into >= 0.0 {
                return false;
            }
            into < -CORNER_COS || (first_touching && (t - n * into).dot(normal) < 0.0)
        })
    };
    if dead_end(tangent_of(reversed)) && !dead_end(tangent_of(!reversed)) {
        reversed = !reversed;
    }
    let follow = Follow {
        index: close[first].1,
        reversed,
    };
    (tangent_of(reversed) * u_des.norm(), Some(follow))
}

/// Map a single-integrator velocity to unicycle inputs through a point
/// `lookahead` ahead of the robot center, then saturate.
pub fn si_to_unicycle(u: Vec2, heading: f64, params: &ControlParams) -> UnicycleCmd {
    let (s, c) = heading.sin_cos();
    let v = c * u.x + s * u.y;
    let omega = (-s * u.x + c * u.y) / params.lookahead;
    UnicycleCmd {
        v: v.clamp(-params.v_max, params.v_max),
        omega: omega.clamp(-params.omega_max, params.omega_max),
    }
}

/// Velocity of the look-ahead point produced by a unicycle command; the
/// inverse of [`si_to_unicycle`] before saturation.
pub fn unicycle_to_si(cmd: UnicycleCmd, heading: f64, params: &ControlParams) -> Vec2 {
    let (s, c) = heading.sin_cos();
    Vec2::new(
        cmd.v * c - params.lookahead * cmd.omega * s,
        cmd.v * s + params.lookahead * cmd.omega * c,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlStatus {
    Ok,
    /// QP infeasible; robot stopped.
    Infeasible,
    /// QP could not be certified; robot stopped.
    NumericalFailure,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControlOutput {
    pub cmd: UnicycleCmd,
    /// Solved single-integrator velocity, broadcast to neighbors.
    pub si_velocity: Vec2,
    pub status: ControlStatus,
}

/// Full per-robot control step.
///
/// The forward speed is additionally limited so that the center velocity
/// `v·(cos θ, sin θ)` satisfies every barrier row of the program; the
/// center can only move along its heading, so the look-ahead solution alone
/// does not keep the centers inside the safe set.
#[allow(clippy::too_many_arguments)]
/// Mean velocity over one period per unit forward speed when turning at
/// `omega`: the chord of the exact arc divided by `dt`.
pub fn chord(heading: f64, omega: f64, dt: f64) -> Vec2 {
    let half = 0.5 * omega * dt;
    let sinc = if half.abs() < 1e-9 { 1.0 } else { half.sin() / half };
    Vec2::from_angle(heading + half) * sinc
}

/// Exact-arc integration of unicycle kinematics over one period.
pub fn integrate_unicycle(position: Vec2, heading: f64, cmd: UnicycleCmd, dt: f64) -> (Vec2, f64) {
    let p = position + chord(heading, cmd.omega, dt) * (cmd.v * dt);
    (p, normalize_angle(heading + cmd.omega * dt))
}

#[allow(clippy::too_many_arguments)]
pub fn compute_control(
    position: Vec2,
    heading: f64,
    goal: Vec2,
    u_des: Vec2,
    neighbors: &[Vec2],
    obstacles: &[Obstacle],
    params: &SimParams,
    include_clf: bool,
) -> ControlOutput {
    let stop = |status| ControlOutput {
        cmd: UnicycleCmd::default(),
        si_velocity: Vec2::ZERO,
        status,
    };
    if !u_des.is_finite() {
        return stop(ControlStatus::NumericalFailure);
    }
    let problem = build_qp(position, goal, u_des, neighbors, obstacles, params, include_clf);
    let sol = match qp::solve(&problem) {
        Ok(s) => s,
        Err(QpError::Infeasible) => return stop(ControlStatus::Infeasible),
        Err(_) => return stop(ControlStatus::NumericalFailure),
    };
    let u = Vec2::new(sol.u[0], sol.u[1]);
    let mut cmd = si_to_unicycle(u, heading, &params.control);

    let barrier_rows = &problem.rows[usize::from(include_clf)..];
    // Filter the speed against the displacement actually taken this period.
    let dir = chord(heading, cmd.omega, params.dt);
    let (mut lo, mut hi) = (-params.control.v_max, params.control.v_max);
    for row in barrier_rows {
        // The slack keeps a heading exactly tangent to an active barrier
        // (rate ~ 1e-17, b = 0) from pinning the speed to zero.
        let b = row.b + FILTER_SLACK;
        let rate = row.a[0] * dir.x + row.a[1] * dir.y;
        if rate > 0.0 {
            hi = hi.min(b / rate);
        } else if rate < 0.0 {
            lo = lo.max(b / rate);
        } else if b < 0.0 {
            hi = f64::NEG_INFINITY;
        }
    }
    cmd.v = if lo <= hi { cmd.v.clamp(lo, hi) } else { 0.0 };

    ControlOutput {
        cmd,
        si_velocity: u,
        status: ControlStatus::Ok,
    }
}
