//! Generators shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use swarm_nav::geometry::{Obstacle, Vec2};
use swarm_nav::mgr::{adjust_grid, is_mgr_valid, Roundabout};
use swarm_nav::params::SimParams;
use swarm_nav::world::Workspace;
use swarm_nav::qp::{QpProblem, DIM};

/// A random QP with up to `max_rows` general rows. Most rows are built to
/// pass near a random interior point so a good share of problems are
/// feasible with several active constraints; the rest are arbitrary.
pub fn random_qp(rng: &mut impl Rng, max_rows: usize) -> QpProblem {
    let hessian = [rng.gen_range(0.2..4.0), rng.gen_range(0.2..4.0), rng.gen_range(0.2..4.0)];
    let linear = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)];
    // Always boxed, like the controller's problem; unbounded random rows can
    // meet in slivers far out where no double-precision certificate exists.
    let lo: [f64; DIM] = std::array::from_fn(|_| rng.gen_range(-2.0..0.0));
    let hi: [f64; DIM] = std::array::from_fn(|k| lo[k] + rng.gen_range(0.1..3.0));
    let mut p = QpProblem::new(hessian, linear).with_bounds(lo, hi);
    let anchor: [f64; DIM] = std::array::from_fn(|k| {
        rng.gen_range(p.lower[k]..=p.upper[k])
    });
    for _ in 0..rng.gen_range(0..=max_rows) {
        let a: [f64; DIM] = std::array::from_fn(|_| rng.gen_range(-2.0..2.0));
        let b = if rng.gen_bool(0.85) {
            a.iter().zip(&anchor).map(|(x, y)| x * y).sum::<f64>() + rng.gen_range(0.0..0.5)
        } else {
            rng.gen_range(-3.0..3.0)
        };
        p.push_row(a, b);
    }
    p
}

/// Largest violation of any row or bound at `u`.
pub fn max_violation(p: &QpProblem, u: &[f64; DIM]) -> f64 {
    p.constraint_rows()
        .iter()
        .map(|r| r.a.iter().zip(u).map(|(x, y)| x * y).sum::<f64>() - r.b)
        .fold(0.0, f64::max)
}

/// Random circles and rectangles scattered over a `size × size` square.
pub fn random_obstacles(rng: &mut impl Rng, size: f64, count: usize) -> Vec<Obstacle> {
    (0..count)
        .map(|_| {
            let c = Vec2::new(rng.gen_range(0.0..size), rng.gen_range(0.0..size));
            if rng.gen_bool(0.5) {
                Obstacle::circle(c, rng.gen_range(0.2..1.2))
            } else {
                let h = Vec2::new(rng.gen_range(0.2..1.2), rng.gen_range(0.2..1.2));
                Obstacle::rect(c - h, c + h)
            }
        })
        .collect()
}

/// Closest approach of two constant-velocity points by dense sampling of
/// `[0, horizon]` followed by ternary refinement around the best sample.
pub fn sampled_min_dist(p_i: Vec2, v_i: Vec2, p_j: Vec2, v_j: Vec2, horizon: f64) -> f64 {
    const SAMPLES: usize = 10_000;
    let d = |t: f64| ((p_i + v_i * t) - (p_j + v_j * t)).norm();
    let step = horizon / SAMPLES as f64;
    let best = (0..=SAMPLES)
        .map(|k| k as f64 * step)
        .min_by(|a, b| d(*a).total_cmp(&d(*b)))
        .unwrap_or(0.0);
    let (mut lo, mut hi) = ((best - step).max(0.0), (best + step).min(horizon));
    for _ in 0..200 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if d(m1) <= d(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    d(0.5 * (lo + hi)).min(d(best))
}

/// A random obstacle field with an invalid roundabout of 1–4 members in it.
pub fn random_invalid_roundabout(rng: &mut impl Rng, params: &SimParams) -> (Workspace, Roundabout) {
    loop {
        let count = rng.gen_range(1..12);
        let ws = Workspace {
            width: 10.0,
            height: 10.0,
            obstacles: random_obstacles(rng, 10.0, count),
        };
        for _ in 0..50 {
            let center = Vec2::new(rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0));
            let mut c = Roundabout::new(0, center, params.mgr.base_radius);
            let members = rng.gen_range(1..=4);
            c.members.extend(0..members);
            if !is_mgr_valid(&c, &ws, params) {
                return (ws, c);
            }
        }
    }
}

/// Distance from `c.center` to the nearest valid cell of the search lattice,
/// found by checking every cell.
pub fn nearest_valid_cell(c: &Roundabout, ws: &Workspace, params: &SimParams) -> Option<f64> {
    let (cell, per_side, origin) = adjust_grid(c, params);
    let mut best: Option<f64> = None;
    for iy in 0..per_side {
        for ix in 0..per_side {
            let p = origin + Vec2::new((ix as f64 + 0.5) * cell, (iy as f64 + 0.5) * cell);
            let moved = Roundabout { center: p, ..c.clone() };
            if is_mgr_valid(&moved, ws, params) {
                let d = p.distance(c.center);
                best = Some(best.map_or(d, |b| b.min(d)));
            }
        }
    }
    best
}
