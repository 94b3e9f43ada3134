//! Cost-to-go over the static map and line-of-sight waypoints.
//!
//! A goal behind a cluster of obstacles can trap a purely local
//! goal-seeking law. Each robot therefore keeps a cost-to-go field to its
//! goal over the known static map and aims its nominal velocity at the
//! farthest point of the descending path it can see.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::geometry::{dist_point_obstacle, dist_segment_obstacle, Obstacle, Vec2};

/// Cells within this much of the barrier distance are passable but cost
/// more, so planned paths keep off obstacles where there is room.
const PLAN_MARGIN: f64 = 0.1;

/// Path-length multiplier for stepping into a cell within the margin.
const NEAR_COST: f64 = 3.0;

/// Slack on the barrier distance in line-of-sight tests: a robot may sit
/// exactly on its barrier.
const SIGHT_SLACK: f64 = 0.01;

/// How far along the descending path a waypoint may lie, in cells.
const HORIZON_CELLS: usize = 40;

/// How far to look for a free cell when the robot's own cell is blocked.
const SNAP_CELLS: i64 = 4;

/// Occupancy of the workspace at a fixed resolution.
#[derive(Clone, Debug)]
pub struct FreeGrid {
    cell: f64,
    nx: usize,
    ny: usize,
    /// Distance from each cell center to the nearest barrier.
    clear: Vec<f64>,
    barriers: Vec<Obstacle>,
    clearance: f64,
}

/// Path length to one goal from every cell; infinite where unreachable.
#[derive(Clone, Debug)]
pub struct CostField {
    cost: Vec<f32>,
    clear: Vec<f64>,
    goal_cell: usize,
}

impl FreeGrid {
    /// A cell is free when its center keeps `clearance` from every barrier.
    pub fn new(width: f64, height: f64, barriers: &[Obstacle], cell: f64, clearance: f64) -> Self {
        let nx = (width / cell).ceil().max(1.0) as usize;
        let ny = (height / cell).ceil().max(1.0) as usize;
        let mut clear = vec![f64::INFINITY; nx * ny];
        for iy in 0..ny {
            for ix in 0..nx {
                let c = Vec2::new((ix as f64 + 0.5) * cell, (iy as f64 + 0.5) * cell);
                clear[iy * nx + ix] = barriers
                    .iter()
                    .map(|o| dist_point_obstacle(c, o))
                    .fold(f64::INFINITY, f64::min);
            }
        }
        Self {
            cell,
            nx,
            ny,
            clear,
            barriers: barriers.to_vec(),
            clearance,
        }
    }

    fn cell_of(&self, p: Vec2) -> (i64, i64) {
        ((p.x / self.cell).floor() as i64, (p.y / self.cell).floor() as i64)
    }

    fn index(&self, ix: i64, iy: i64) -> Option<usize> {
        (ix >= 0 && iy >= 0 && (ix as usize) < self.nx && (iy as usize) < self.ny)
            .then(|| iy as usize * self.nx + ix as usize)
    }

    fn center(&self, k: usize) -> Vec2 {
        let (ix, iy) = (k % self.nx, k / self.nx);
        Vec2::new((ix as f64 + 0.5) * self.cell, (iy as f64 + 0.5) * self.cell)
    }

    /// The static clearances with `extra` obstacles taken into account.
    fn clear_with(&self, extra: &[Obstacle]) -> Vec<f64> {
        let mut clear = self.clear.clone();
        let reach = self.clearance + PLAN_MARGIN;
        for o in extra {
            let (lo, hi) = o.bounds();
            let (x0, y0) = self.cell_of(lo - Vec2::new(reach, reach));
            let (x1, y1) = self.cell_of(hi + Vec2::new(reach, reach));
            for iy in y0..=y1 {
                for ix in x0..=x1 {
                    if let Some(k) = self.index(ix, iy) {
                        clear[k] = clear[k].min(dist_point_obstacle(self.center(k), o));
                    }
                }
            }
        }
        clear
    }

    /// Passable neighbors of cell `k` and the cost of stepping to each.
    fn neighbors<'g>(&'g self, clear: &'g [f64], k: usize) -> impl Iterator<Item = (usize, f64)> + 'g {
        let free = move |j: usize| clear[j] >= self.clearance;
        let (ix, iy) = ((k % self.nx) as i64, (k / self.nx) as i64);
        const STEPS: [(i64, i64); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];
        STEPS.iter().filter_map(move |&(dx, dy)| {
            let j = self.index(ix + dx, iy + dy)?;
            if !free(j) {
                return None;
            }
            // No corner cutting past a blocked cell.
            if dx != 0 && dy != 0 {
                let a = self.index(ix + dx, iy)?;
                let b = self.index(ix, iy + dy)?;
                if !free(a) || !free(b) {
                    return None;
                }
            }
            let step = if dx != 0 && dy != 0 { std::f64::consts::SQRT_2 } else { 1.0 };
            let weight = if clear[j] < self.clearance + PLAN_MARGIN { NEAR_COST } else { 1.0 };
            Some((j, step * weight * self.cell))
        })
    }

    /// Whether the straight segment keeps the barrier distance from every
    /// barrier and every `extra` obstacle.
    pub fn line_clear(&self, a: Vec2, b: Vec2, extra: &[Obstacle]) -> bool {
        let need = self.clearance - SIGHT_SLACK;
        self.barriers
            .iter()
            .chain(extra)
            .all(|o| dist_segment_obstacle(a, b, o) >= need)
    }

    /// Dijkstra from the goal cell over free cells, 8-connected, with the
    /// `extra` obstacles added to the static map. The goal cell counts as
    /// free even if it lies within the margin.
    pub fn cost_to(&self, goal: Vec2, extra: &[Obstacle]) -> CostField {
        let clear = self.clear_with(extra);
        let mut cost = vec![f32::INFINITY; self.nx * self.ny];
        let (gx, gy) = self.cell_of(goal);
        let gx = gx.clamp(0, self.nx as i64 - 1);
        let gy = gy.clamp(0, self.ny as i64 - 1);
        let goal_cell = self.index(gx, gy).expect("clamped into the grid");
        let mut dist = vec![f64::INFINITY; self.nx * self.ny];
        dist[goal_cell] = 0.0;
        // Costs are non-negative, so their bit patterns order like the values.
        let mut heap = BinaryHeap::new();
        heap.push(Reverse((0.0f64.to_bits(), goal_cell)));
        while let Some(Reverse((bits, k))) = heap.pop() {
            let d = f64::from_bits(bits);
            if d > dist[k] {
                continue;
            }
            for (j, w) in self.neighbors(&clear, k) {
                let nd = d + w;
                if nd < dist[j] {
                    dist[j] = nd;
                    heap.push(Reverse((nd.to_bits(), j)));
                }
            }
        }
        for (c, d) in cost.iter_mut().zip(&dist) {
            *c = *d as f32;
        }
        CostField { cost, clear, goal_cell }
    }

    /// The reachable cell nearest to `p`, searching a small neighborhood.
    fn snap(&self, field: &CostField, p: Vec2) -> Option<usize> {
        let (cx, cy) = self.cell_of(p);
        let mut best: Option<(f64, usize)> = None;
        for dy in -SNAP_CELLS..=SNAP_CELLS {
            for dx in -SNAP_CELLS..=SNAP_CELLS {
                let Some(k) = self.index(cx + dx, cy + dy) else {
                    continue;
                };
                if !field.cost[k].is_finite() {
                    continue;
                }
                let d = self.center(k).distance(p);
                if best.is_none_or(|(bd, bk)| d < bd || (d == bd && k < bk)) {
                    best = Some((d, k));
                }
            }
        }
        best.map(|(_, k)| k)
    }

    /// Where to head from `from`: the goal itself when in sight, otherwise
    /// the farthest visible cell along the steepest descent of `field`.
    /// Falls back to the goal when `from` is cut off from it. `extra` must
    /// be the obstacles the field was built with.
    pub fn waypoint(&self, field: &CostField, from: Vec2, goal: Vec2, extra: &[Obstacle]) -> Vec2 {
        if self.line_clear(from, goal, extra) {
            return goal;
        }
        let Some(start) = self.snap(field, from) else {
            return goal;
        };
        let mut path = vec![start];
        let mut k = start;
        while path.len() <= HORIZON_CELLS && k != field.goal_cell {
            let next = self
                .neighbors(&field.clear, k)
                .map(|(j, _)| j)
                .filter(|&j| field.cost[j] < field.cost[k])
                .min_by(|&a, &b| field.cost[a].total_cmp(&field.cost[b]).then(a.cmp(&b)));
            match next {
                Some(j) => {
                    path.push(j);
                    k = j;
                }
                None => break,
            }
        }
        if k == field.goal_cell && self.line_clear(from, goal, extra) {
            return goal;
        }
        path.iter()
            .rev()
            .map(|&j| self.center(j))
            .find(|&c| self.line_clear(from, c, extra))
            .unwrap_or_else(|| self.center(path[path.len().min(2) - 1]))
    }
}
