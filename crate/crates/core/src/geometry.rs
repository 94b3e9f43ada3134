//! Plane geometry shared by the world model, the controller and the
//! roundabout layer.

use std::f64::consts::{PI, TAU};
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

/// A point or vector in the plane, in meters (or m/s for velocities).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Unit vector at `angle` radians from the +x axis.
    pub fn from_angle(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(c, s)
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the 3D cross product.
    pub fn cross(self, other: Vec2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    /// Unit vector in the same direction, or `None` for (near-)zero vectors.
    pub fn normalized(self) -> Option<Vec2> {
        let n = self.norm();
        (n > 1e-12).then(|| self / n)
    }

    /// Rotate counterclockwise by `angle` radians.
    pub fn rotated(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    /// Counterclockwise perpendicular, `(-y, x)`.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    /// Scale down to `max_norm` if longer.
    pub fn clamp_norm(self, max_norm: f64) -> Vec2 {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            self * (max_norm / n)
        } else {
            self
        }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, rhs: Vec2) {
        self.x += rhs.x;
        self.y += rhs.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl SubAssign for Vec2 {
    fn sub_assign(&mut self, rhs: Vec2) {
        self.x -= rhs.x;
        self.y -= rhs.y;
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, rhs: f64) -> Vec2 {
        Vec2::new(self.x * rhs, self.y * rhs)
    }
}

impl Mul<Vec2> for f64 {
    type Output = Vec2;
    fn mul(self, rhs: Vec2) -> Vec2 {
        rhs * self
    }
}

impl Div<f64> for Vec2 {
    type Output = Vec2;
    fn div(self, rhs: f64) -> Vec2 {
        Vec2::new(self.x / rhs, self.y / rhs)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Wrap an angle into `(-π, π]`.
pub fn normalize_angle(angle: f64) -> f64 {
    let mut a = angle.rem_euclid(TAU);
    if a > PI {
        a -= TAU;
    }
    a
}

/// Static obstacle: a disc or an axis-aligned rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Obstacle {
    Circle { center: Vec2, radius: f64 },
    Rect { min: Vec2, max: Vec2 },
}

impl Obstacle {
    pub fn circle(center: Vec2, radius: f64) -> Self {
        Obstacle::Circle { center, radius }
    }

    pub fn rect(min: Vec2, max: Vec2) -> Self {
        Obstacle::Rect { min, max }
    }

    pub fn is_well_formed(&self) -> bool {
        match *self {
            Obstacle::Circle { center, radius } => center.is_finite() && radius > 0.0,
            Obstacle::Rect { min, max } => {
                min.is_finite() && max.is_finite() && max.x > min.x && max.y > min.y
            }
        }
    }

    pub fn area(&self) -> f64 {
        match *self {
            Obstacle::Circle { radius, .. } => PI * radius * radius,
            Obstacle::Rect { min, max } => (max.x - min.x) * (max.y - min.y),
        }
    }

    /// Closest point of the obstacle (boundary or interior) to `p`.
    /// Returns `p` itself when `p` lies inside.
    pub fn closest_point(&self, p: Vec2) -> Vec2 {
        match *self {
            Obstacle::Circle { center, radius } => {
                let d = p - center;
                let n = d.norm();
                if n <= radius {
                    p
                } else {
                    center + d * (radius / n)
                }
            }
            Obstacle::Rect { min, max } => {
                Vec2::new(p.x.clamp(min.x, max.x), p.y.clamp(min.y, max.y))
            }
        }
    }

    pub fn contains(&self, p: Vec2) -> bool {
        match *self {
            Obstacle::Circle { center, radius } => p.distance(center) <= radius,
            Obstacle::Rect { min, max } => {
                p.x >= min.x && p.x <= max.x && p.y >= min.y && p.y <= max.y
            }
        }
    }

    /// Axis-aligned bounding box as `(min, max)`.
    pub fn bounds(&self) -> (Vec2, Vec2) {
        match *self {
            Obstacle::Circle { center, radius } => (
                center - Vec2::new(radius, radius),
                center + Vec2::new(radius, radius),
            ),
            Obstacle::Rect { min, max } => (min, max),
        }
    }
}

/// Euclidean distance from `p` to the obstacle, zero if `p` is inside.
pub fn dist_point_obstacle(p: Vec2, obs: &Obstacle) -> f64 {
    p.distance(obs.closest_point(p))
}

/// Minimum separation between two obstacles (zero when they overlap).
pub fn dist_obstacle_obstacle(a: &Obstacle, b: &Obstacle) -> f64 {
    match (*a, *b) {
        (Obstacle::Circle { center: c1, radius: r1 }, Obstacle::Circle { center: c2, radius: r2 }) => {
            (c1.distance(c2) - r1 - r2).max(0.0)
        }
        (Obstacle::Circle { center, radius }, rect @ Obstacle::Rect { .. })
        | (rect @ Obstacle::Rect { .. }, Obstacle::Circle { center, radius }) => {
            (dist_point_obstacle(center, &rect) - radius).max(0.0)
        }
        (Obstacle::Rect { min: a0, max: a1 }, Obstacle::Rect { min: b0, max: b1 }) => {
            let dx = (b0.x - a1.x).max(a0.x - b1.x).max(0.0);
            let dy = (b0.y - a1.y).max(a0.y - b1.y).max(0.0);
            dx.hypot(dy)
        }
    }
}

/// Annular sector centered at `center`, covering radii
/// `[inner_radius, outer_radius]` and angles `mid_angle ± half_width`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sector {
    pub center: Vec2,
    pub inner_radius: f64,
    pub outer_radius: f64,
    pub mid_angle: f64,
    pub half_width: f64,
}

impl Sector {
    fn angle_offset(&self, p: Vec2) -> f64 {
        normalize_angle((p - self.center).angle() - self.mid_angle)
    }

    fn in_angular_band(&self, p: Vec2) -> bool {
        self.half_width >= PI || self.angle_offset(p).abs() <= self.half_width
    }

    /// The two bounding rays' start and end points.
    fn radial_edges(&self) -> [(Vec2, Vec2); 2] {
        [-self.half_width, self.half_width].map(|off| {
            let dir = Vec2::from_angle(self.mid_angle + off);
            (
                self.center + dir * self.inner_radius,
                self.center + dir * self.outer_radius,
            )
        })
    }

    /// Distance from `p` to the sector region (zero inside).
    pub fn distance_to(&self, p: Vec2) -> f64 {
        if sector_contains(self, p) {
            return 0.0;
        }
        let r = p.distance(self.center);
        let mut best = f64::INFINITY;
        if self.in_angular_band(p) {
            // Closest point lies on one of the arcs.
            best = best
                .min((r - self.outer_radius).abs())
                .min((r - self.inner_radius).abs());
        }
        if self.half_width < PI {
            for (a, b) in self.radial_edges() {
                best = best.min(dist_point_segment(p, a, b));
            }
        }
        best
    }

    /// Whether the sector and the obstacle share at least one point.
    pub fn intersects(&self, obs: &Obstacle) -> bool {
        match *obs {
            Obstacle::Circle { center, radius } => self.distance_to(center) <= radius,
            Obstacle::Rect { min, max } => self.intersects_rect(min, max),
        }
    }

    fn intersects_rect(&self, min: Vec2, max: Vec2) -> bool {
        let rect = Obstacle::Rect { min, max };
        let corners = [
            min,
            Vec2::new(max.x, min.y),
            max,
            Vec2::new(min.x, max.y),
        ];
        if corners.iter().any(|&c| sector_contains(self, c)) {
            return true;
        }
        // A sector corner inside the rectangle covers the case where the
        // rectangle swallows the whole sector.
        let edges = self.radial_edges();
        if edges.iter().any(|&(a, b)| rect.contains(a) || rect.contains(b)) {
            return true;
        }
        for i in 0..4 {
            let (c0, c1) = (corners[i], corners[(i + 1) % 4]);
            if self.half_width < PI
                && edges.iter().any(|&(a, b)| segments_intersect(c0, c1, a, b))
            {
                return true;
            }
            for radius in [self.inner_radius, self.outer_radius] {
                if radius > 0.0 && self.segment_hits_arc(c0, c1, radius) {
                    return true;
                }
            }
        }
        false
    }

    fn segment_hits_arc(&self, a: Vec2, b: Vec2, radius: f64) -> bool {
        // Solve |a + t (b - a) - c|² = radius² for t in [0, 1].
        let d = b - a;
        let f = a - self.center;
        let qa = d.norm_sq();
        let qb = 2.0 * f.dot(d);
        let qc = f.norm_sq() - radius * radius;
        let disc = qb * qb - 4.0 * qa * qc;
        if qa == 0.0 || disc < 0.0 {
            return false;
        }
        let sq = disc.sqrt();
        [(-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa)]
            .into_iter()
            .filter(|t| (0.0..=1.0).contains(t))
            .any(|t| self.in_angular_band(a + d * t))
    }
}

/// True iff `p` lies in the radial band and the angular band of `s`.
pub fn sector_contains(s: &Sector, p: Vec2) -> bool {
    let r = p.distance(s.center);
    r >= s.inner_radius && r <= s.outer_radius && s.in_angular_band(p)
}

pub fn dist_point_segment(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let len_sq = ab.norm_sq();
    if len_sq == 0.0 {
        return p.distance(a);
    }
    let t = ((p - a).dot(ab) / len_sq).clamp(0.0, 1.0);
    p.distance(a + ab * t)
}

/// Distance between the segment `a`–`b` and an obstacle (zero if they touch).
pub fn dist_segment_obstacle(a: Vec2, b: Vec2, obs: &Obstacle) -> f64 {
    match *obs {
        Obstacle::Circle { center, radius } => (dist_point_segment(center, a, b) - radius).max(0.0),
        Obstacle::Rect { min, max } => {
            let corners = [min, Vec2::new(max.x, min.y), max, Vec2::new(min.x, max.y)];
            if obs.contains(a) || obs.contains(b) {
                return 0.0;
            }
            let mut best = dist_point_obstacle(a, obs).min(dist_point_obstacle(b, obs));
            for i in 0..4 {
                let (c0, c1) = (corners[i], corners[(i + 1) % 4]);
                if segments_intersect(a, b, c0, c1) {
                    return 0.0;
                }
                best = best.min(dist_point_segment(c0, a, b));
            }
            best
        }
    }
}

fn segments_intersect(p1: Vec2, p2: Vec2, q1: Vec2, q2: Vec2) -> bool {
    fn orient(a: Vec2, b: Vec2, c: Vec2) -> f64 {
        (b - a).cross(c - a)
    }
    fn on_segment(a: Vec2, b: Vec2, p: Vec2) -> bool {
        p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
    }
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// Closest approach of two constant-velocity points over `[0, horizon]`.
///
/// Returns `(d_min, t_star)`, the minimum separation and the time at which
/// it occurs.
pub fn min_dist_linear_trajectories(
    p_i: Vec2,
    v_i: Vec2,
    p_j: Vec2,
    v_j: Vec2,
    horizon: f64,
) -> (f64, f64) {
    let dp = p_i - p_j;
    let dv = v_i - v_j;
    let dv_sq = dv.norm_sq();
    let t_unc = if dv_sq == 0.0 { 0.0 } else { -dp.dot(dv) / dv_sq };
    let t_star = t_unc.clamp(0.0, horizon);
    ((dp + dv * t_star).norm(), t_star)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_6;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn point_obstacle_distances() {
        let c = Obstacle::circle(Vec2::new(3.0, 0.0), 1.0);
        assert!(close(dist_point_obstacle(Vec2::ZERO, &c), 2.0));
        let r = Obstacle::rect(Vec2::new(1.0, 1.0), Vec2::new(2.0, 2.0));
        assert!(close(dist_point_obstacle(Vec2::ZERO, &r), 2f64.sqrt()));
        assert_eq!(dist_point_obstacle(Vec2::new(1.5, 1.5), &r), 0.0);
    }

    #[test]
    fn sector_membership() {
        let s = Sector {
            center: Vec2::ZERO,
            inner_radius: 0.0,
            outer_radius: 2.0,
            mid_angle: 0.0,
            half_width: FRAC_PI_6,
        };
        assert!(sector_contains(&s, Vec2::new(1.0, 0.0)));
        assert!(!sector_contains(&s, Vec2::new(0.0, 1.0)));
        assert!(!sector_contains(&s, Vec2::new(3.0, 0.0)));
    }

    #[test]
    fn sector_wraps_across_pi() {
        let s = Sector {
            center: Vec2::ZERO,
            inner_radius: 0.5,
            outer_radius: 2.0,
            mid_angle: PI,
            half_width: 0.2,
        };
        assert!(sector_contains(&s, Vec2::new(-1.0, 0.1)));
        assert!(sector_contains(&s, Vec2::new(-1.0, -0.1)));
        assert!(!sector_contains(&s, Vec2::new(1.0, 0.0)));
    }

    #[test]
    fn trajectory_minimum_examples() {
        let (d, t) = min_dist_linear_trajectories(
            Vec2::new(1.0, 0.0),
            Vec2::new(-1.0, 0.0),
            Vec2::ZERO,
            Vec2::ZERO,
            1.0,
        );
        assert!(close(d, 0.0) && close(t, 1.0));
        let (d, t) =
            min_dist_linear_trajectories(Vec2::new(2.0, 0.0), Vec2::ZERO, Vec2::ZERO, Vec2::ZERO, 5.0);
        assert!(close(d, 2.0) && close(t, 0.0));
        let (d, t) = min_dist_linear_trajectories(
            Vec2::new(1.0, 1.0),
            Vec2::new(-1.0, 0.0),
            Vec2::ZERO,
            Vec2::ZERO,
            2.0,
        );
        assert!(close(d, 1.0) && close(t, 1.0));
    }

    #[test]
    fn sector_obstacle_intersection() {
        let s = Sector {
            center: Vec2::ZERO,
            inner_radius: 1.0,
            outer_radius: 2.0,
            mid_angle: 0.0,
            half_width: 0.3,
        };
        assert!(s.intersects(&Obstacle::circle(Vec2::new(1.5, 0.0), 0.1)));
        assert!(s.intersects(&Obstacle::circle(Vec2::new(2.3, 0.0), 0.35)));
        assert!(!s.intersects(&Obstacle::circle(Vec2::new(2.5, 0.0), 0.3)));
        assert!(!s.intersects(&Obstacle::circle(Vec2::new(0.0, 1.5), 0.5)));
        // Rectangle straddling the sector without any corner inside it.
        assert!(s.intersects(&Obstacle::rect(Vec2::new(1.4, -5.0), Vec2::new(1.6, 5.0))));
        // Rectangle containing the whole sector.
        assert!(s.intersects(&Obstacle::rect(Vec2::new(-5.0, -5.0), Vec2::new(5.0, 5.0))));
        // Rectangle inside the inner hole.
        assert!(!s.intersects(&Obstacle::rect(Vec2::new(0.1, -0.1), Vec2::new(0.5, 0.1))));
        // Rectangle poking only through the outer arc.
        assert!(s.intersects(&Obstacle::rect(Vec2::new(1.95, -0.05), Vec2::new(3.0, 0.05))));
    }

    #[test]
    fn segment_obstacle_distance() {
        let c = Obstacle::circle(Vec2::new(0.0, 1.0), 0.5);
        assert!(close(dist_segment_obstacle(Vec2::new(-1.0, 0.0), Vec2::new(1.0, 0.0), &c), 0.5));
        let r = Obstacle::rect(Vec2::new(-1.0, 1.0), Vec2::new(1.0, 2.0));
        assert_eq!(dist_segment_obstacle(Vec2::new(0.0, 0.0), Vec2::new(0.0, 3.0), &r), 0.0);
        assert!(close(dist_segment_obstacle(Vec2::new(2.0, 0.0), Vec2::new(2.0, 3.0), &r), 1.0));
        assert!(close(dist_segment_obstacle(Vec2::new(-3.0, 0.0), Vec2::new(3.0, 0.0), &r), 1.0));
    }

    #[test]
    fn angle_normalization_range() {
        assert!(close(normalize_angle(PI), PI));
        assert!(close(normalize_angle(-PI), PI));
        assert!(close(normalize_angle(3.0 * PI / 2.0), -PI / 2.0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn sample_min(p_i: Vec2, v_i: Vec2, p_j: Vec2, v_j: Vec2, t: f64) -> f64 {
            let n = 10_000;
            (0..=n)
                .map(|k| {
                    let s = t * k as f64 / n as f64;
                    ((p_i + v_i * s) - (p_j + v_j * s)).norm()
                })
                .fold(f64::INFINITY, f64::min)
        }

        proptest! {
            #[test]
            fn closed_form_minimum_matches_sampling(
                px in -5.0..5.0f64, py in -5.0..5.0f64,
                vx in -2.0..2.0f64, vy in -2.0..2.0f64,
                horizon in 0.1..3.0f64,
            ) {
                let p = Vec2::new(px, py);
                let v = Vec2::new(vx, vy);
                let (d, _) = min_dist_linear_trajectories(p, v, Vec2::ZERO, Vec2::ZERO, horizon);
                prop_assert!(d <= p.norm() + 1e-12);
                // The grid step bounds the sampling error by |Δv|·h·step/2
                // away from the minimum (and quadratically near it).
                let sampled = sample_min(p, v, Vec2::ZERO, Vec2::ZERO, horizon);
                prop_assert!(d <= sampled + 1e-12);
                prop_assert!(sampled - d <= 1e-6 + v.norm() * horizon / 10_000.0);
            }

            #[test]
            fn sector_rotation_invariance(
                mid in -3.0..3.0f64, half in 0.05..3.1f64,
                inner in 0.0..1.0f64, width in 0.1..2.0f64,
                px in -3.0..3.0f64, py in -3.0..3.0f64,
                rot in -6.0..6.0f64,
            ) {
                let s = Sector {
                    center: Vec2::new(0.3, -0.2),
                    inner_radius: inner,
                    outer_radius: inner + width,
                    mid_angle: mid,
                    half_width: half,
                };
                let p = Vec2::new(px, py);
                let rel = p - s.center;
                // Skip points numerically on the boundary.
                let r = rel.norm();
                let off = normalize_angle(rel.angle() - mid).abs();
                prop_assume!((r - inner).abs() > 1e-9 && (r - inner - width).abs() > 1e-9);
                prop_assume!((off - half).abs() > 1e-9);
                let rotated = Sector {
                    mid_angle: mid + rot,
                    ..s
                };
                let q = s.center + rel.rotated(rot);
                prop_assert_eq!(sector_contains(&s, p), sector_contains(&rotated, q));
            }
        }
    }
}
