//! Simulation, controller and roundabout-layer parameters.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which navigation stack drives the robots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// CLF-CBF controller with the roundabout deadlock-prevention layer.
    Mgr,
    /// Plain CLF-CBF controller.
    ClfCbf,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Mgr => "mgr",
            Method::ClfCbf => "clf-cbf",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mgr" => Ok(Method::Mgr),
            "clf-cbf" => Ok(Method::ClfCbf),
            other => Err(format!("unknown method `{other}` (expected mgr or clf-cbf)")),
        }
    }
}

/// Controller constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlParams {
    /// Safety radius; robots keep centers at least `2 r_safe` apart.
    pub r_safe: f64,
    /// Class-K gain of the CLF decrease condition.
    pub clf_gain: f64,
    /// Extended class-K gain of the barrier conditions.
    pub cbf_gain: f64,
    pub v_max: f64,
    pub omega_max: f64,
    /// Look-ahead distance of the single-integrator to unicycle map.
    pub lookahead: f64,
    /// Proportional gain of the nominal goal-seeking law, 1/s.
    pub goal_gain: f64,
    /// Extra distance beyond `d_safe` at which obstacle following engages.
    pub rhr_trigger: f64,
    /// Cell size of the static-map grid used to pick line-of-sight
    /// waypoints toward the goal; 0 heads straight for the goal.
    pub plan_cell: f64,
}

impl ControlParams {
    pub fn d_safe(&self) -> f64 {
        2.0 * self.r_safe
    }
}

impl Default for ControlParams {
    fn default() -> Self {
        Self {
            r_safe: 0.22,
            clf_gain: 1.0,
            cbf_gain: 5.0,
            v_max: 0.8,
            omega_max: FRAC_PI_2,
            lookahead: 0.05,
            goal_gain: 1.0,
            rhr_trigger: 0.3,
            plan_cell: 0.1,
        }
    }
}

/// Roundabout-layer constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MgrParams {
    /// Deadlock prediction horizon `T`, seconds.
    pub horizon: f64,
    /// Deadlock prediction threshold `k_D` in `[1, 2)`.
    pub k_d: f64,
    /// Roundabout proximity `δ_c`: an existing roundabout within this
    /// distance of a new conflict center is reused.
    pub center_proximity: f64,
    /// Base roundabout radius `C.r`.
    pub base_radius: f64,
    pub comm_range: f64,
    pub sensing_range: f64,
    /// Clearance added per member when validating a roundabout (`k`).
    pub radius_increment: f64,
    /// Radial gain `k_p` of the orbit velocity, in `(0, 1]`.
    pub radial_gain: f64,
    /// Half-angle `δ_θ` of the escape sector.
    pub escape_half_angle: f64,
    /// Arrival tolerance `ε`, must be below `r_safe`.
    pub arrival_eps: f64,
    /// Cell size of the center-adjustment grid.
    pub grid_cell: f64,
    /// Half-width of the square searched when adjusting a center.
    pub search_radius: f64,
    /// Band above `2 r_safe` treated as "barrier constraint active".
    pub contact_tol: f64,
    /// Bound on `|cos|` between center and goal directions for escape.
    pub orthogonality_tol: f64,
    /// Extra obstacle clearance demanded of a roundabout center on top of
    /// `C.r + k C.n`, so an orbiting robot keeps its own `2 r_safe` barrier
    /// distance from obstacles. Zero gives the bare `C.r + k C.n` test.
    pub obstacle_margin: f64,
}

impl Default for MgrParams {
    fn default() -> Self {
        let base_radius = 0.3;
        Self {
            horizon: 1.0,
            k_d: 1.0,
            center_proximity: 2.0,
            base_radius,
            comm_range: 1.0,
            sensing_range: 1.0,
            radius_increment: 0.1,
            radial_gain: 0.05,
            escape_half_angle: PI / 12.0,
            arrival_eps: 0.1,
            grid_cell: 0.1,
            search_radius: 10.0 * base_radius,
            contact_tol: 0.01,
            orthogonality_tol: 0.1,
            obstacle_margin: 0.44,
        }
    }
}

/// Everything a run needs besides the scenario itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimParams {
    pub dt: f64,
    pub time_limit: f64,
    pub method: Method,
    pub control: ControlParams,
    pub mgr: MgrParams,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            dt: 0.05,
            time_limit: 120.0,
            method: Method::Mgr,
            control: ControlParams::default(),
            mgr: MgrParams::default(),
        }
    }
}

/// Default escape half-angle: wider when static obstacles are present.
pub fn default_escape_half_angle(has_obstacles: bool) -> f64 {
    if has_obstacles {
        PI / 6.0
    } else {
        PI / 12.0
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid parameter `{name}` = {value}: {reason}")]
pub struct ParamError {
    /// Name of the offending parameter, as spelled on the command line.
    pub name: &'static str,
    pub value: f64,
    pub reason: &'static str,
}

fn check(name: &'static str, value: f64, ok: bool, reason: &'static str) -> Result<(), ParamError> {
    if ok && value.is_finite() {
        Ok(())
    } else {
        Err(ParamError {
            name,
            value,
            reason,
        })
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<(), ParamError> {
        let c = &self.control;
        let m = &self.mgr;
        check("dt", self.dt, self.dt > 0.0, "must be positive")?;
        check("time-limit", self.time_limit, self.time_limit > 0.0, "must be positive")?;
        for (name, v) in [
            ("r-safe", c.r_safe),
            ("clf-gain", c.clf_gain),
            ("cbf-gain", c.cbf_gain),
            ("v-max", c.v_max),
            ("omega-max", c.omega_max),
            ("lookahead", c.lookahead),
            ("goal-gain", c.goal_gain),
            ("rhr-trigger", c.rhr_trigger),
            ("horizon", m.horizon),
            ("center-proximity", m.center_proximity),
            ("base-radius", m.base_radius),
            ("comm-range", m.comm_range),
            ("sensing-range", m.sensing_range),
            ("radius-increment", m.radius_increment),
            ("escape-half-angle", m.escape_half_angle),
            ("arrival-eps", m.arrival_eps),
            ("grid-cell", m.grid_cell),
            ("search-radius", m.search_radius),
            ("contact-tol", m.contact_tol),
            ("orthogonality-tol", m.orthogonality_tol),
        ] {
            check(name, v, v > 0.0, "must be positive")?;
        }
        check("k-d", m.k_d, (1.0..2.0).contains(&m.k_d), "must lie in [1, 2)")?;
        check(
            "radial-gain",
            m.radial_gain,
            m.radial_gain > 0.0 && m.radial_gain <= 1.0,
            "must lie in (0, 1]",
        )?;
        check(
            "arrival-eps",
            m.arrival_eps,
            m.arrival_eps < c.r_safe,
            "must be smaller than r-safe",
        )?;
        check(
            "sensing-range",
            m.sensing_range,
            m.sensing_range == m.comm_range,
            "must equal comm-range",
        )?;
        check(
            "escape-half-angle",
            m.escape_half_angle,
            m.escape_half_angle <= PI,
            "must not exceed pi",
        )?;
        check("plan-cell", c.plan_cell, c.plan_cell >= 0.0, "must not be negative")?;
        check(
            "obstacle-margin",
            m.obstacle_margin,
            m.obstacle_margin >= 0.0,
            "must not be negative",
        )?;
        check(
            "orthogonality-tol",
            m.orthogonality_tol,
            m.orthogonality_tol < 1.0,
            "must be below 1",
        )?;
        Ok(())
    }
}
