//! Dense convex QP over three variables `(u_x, u_y, δ)` with a diagonal
//! Hessian, linear inequality rows and box bounds.
//!
//! [`solve`] is a dual active-set method: it starts at the unconstrained
//! minimizer and adds violated constraints one at a time, dropping active
//! ones whose multiplier would turn negative. Each iteration strictly
//! increases the dual objective, so the method terminates with the exact
//! active set. [`enumeration_oracle`] is an independent brute-force check.

// Index loops read more clearly than iterator chains in the linear algebra.
#![allow(clippy::needless_range_loop)]

use thiserror::Error;

/// Number of decision variables.
pub const DIM: usize = 3;

/// Primal feasibility target for a certified solution.
pub const FEAS_TOL: f64 = 1e-8;
/// Upper bound on the KKT residual of a certified solution.
pub const KKT_TOL: f64 = 1e-6;

const MAX_ORACLE_CONSTRAINTS: usize = 16;

/// One inequality `a · u ≤ b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Row {
    pub a: [f64; DIM],
    pub b: f64,
}

impl Row {
    pub fn new(a: [f64; DIM], b: f64) -> Self {
        Self { a, b }
    }

    fn slack(&self, u: &[f64; DIM]) -> f64 {
        self.b - dot(&self.a, u)
    }
}

/// `min ½ uᵀ diag(hessian) u + linearᵀ u` subject to `rows` and
/// `lower ≤ u ≤ upper` (infinite bounds are ignored).
#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    pub hessian: [f64; DIM],
    pub linear: [f64; DIM],
    pub rows: Vec<Row>,
    pub lower: [f64; DIM],
    pub upper: [f64; DIM],
}

impl QpProblem {
    pub fn new(hessian: [f64; DIM], linear: [f64; DIM]) -> Self {
        Self {
            hessian,
            linear,
            rows: Vec::new(),
            lower: [f64::NEG_INFINITY; DIM],
            upper: [f64::INFINITY; DIM],
        }
    }

    pub fn with_bounds(mut self, lower: [f64; DIM], upper: [f64; DIM]) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn push_row(&mut self, a: [f64; DIM], b: f64) {
        self.rows.push(Row::new(a, b));
    }

    pub fn objective(&self, u: &[f64; DIM]) -> f64 {
        (0..DIM)
            .map(|k| 0.5 * self.hessian[k] * u[k] * u[k] + self.linear[k] * u[k])
            .sum()
    }

    fn validate(&self) -> Result<(), QpError> {
        let ok = self.hessian.iter().all(|h| h.is_finite() && *h > 0.0)
            && self.linear.iter().all(|c| c.is_finite())
            && self
                .rows
                .iter()
                .all(|r| r.a.iter().all(|v| v.is_finite()) && !r.b.is_nan())
            && (0..DIM).all(|k| !self.lower[k].is_nan() && !self.upper[k].is_nan());
        if ok {
            Ok(())
        } else {
            Err(QpError::InvalidProblem)
        }
    }

    /// All constraints as rows, box bounds appended after the general rows.
    pub fn constraint_rows(&self) -> Vec<Row> {
        let mut out = self.rows.clone();
        for k in 0..DIM {
            let mut e = [0.0; DIM];
            if self.upper[k].is_finite() {
                e[k] = 1.0;
                out.push(Row::new(e, self.upper[k]));
            }
            if self.lower[k].is_finite() {
                e[k] = -1.0;
                out.push(Row::new(e, -self.lower[k]));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub u: [f64; DIM],
    pub objective: f64,
    /// Max of stationarity, primal infeasibility, complementarity and dual
    /// infeasibility residuals.
    pub kkt_residual: f64,
    /// One multiplier per entry of [`QpProblem::constraint_rows`].
    pub multipliers: Vec<f64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("constraints are mutually inconsistent")]
    Infeasible,
    #[error("solver could not certify a solution (KKT residual {residual:e})")]
    NumericalFailure { residual: f64 },
    #[error("problem data is not finite or the Hessian is not positive definite")]
    InvalidProblem,
    #[error("oracle supports at most {max} constraints, got {got}")]
    TooManyConstraints { max: usize, got: usize },
}

fn dot(a: &[f64; DIM], b: &[f64; DIM]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn row_norm(a: &[f64; DIM]) -> f64 {
    dot(a, a).sqrt()
}

/// Solve the QP, returning the unique minimizer with its multipliers.
pub fn solve(p: &QpProblem) -> Result<QpSolution, QpError> {
    p.validate()?;
    let rows = p.constraint_rows();
    let h_inv = p.hessian.map(|h| 1.0 / h);
    let m = rows.len();

    let mut x = [0.0; DIM];
    for k in 0..DIM {
        x[k] = -p.linear[k] * h_inv[k];
    }
    let mut active: Vec<usize> = Vec::with_capacity(DIM);
    let mut lambda = vec![0.0; m];
    let max_iter = 20 * (m + DIM) + 50;
    let mut iter = 0;

    loop {
        // Most violated constraint, scaled by row norm.
        let mut pick: Option<(usize, f64)> = None;
        for (i, r) in rows.iter().enumerate() {
            if active.contains(&i) {
                continue;
            }
            let norm = row_norm(&r.a);
            if norm == 0.0 {
                if r.b < -FEAS_TOL {
                    return Err(QpError::Infeasible);
                }
                continue;
            }
            let viol = -r.slack(&x) / norm;
            if viol > 1e-12 * (1.0 + r.b.abs() / norm) && pick.is_none_or(|(_, v)| viol > v) {
                pick = Some((i, viol));
            }
        }
        let Some((q, _)) = pick else { break };

        loop {
            iter += 1;
            if iter > max_iter {
                return Err(QpError::NumericalFailure {
                    residual: f64::INFINITY,
                });
            }
            let aq = rows[q].a;
            let r = multiplier_direction(&rows, &active, &h_inv, &aq)
                .ok_or(QpError::NumericalFailure {
                    residual: f64::INFINITY,
                })?;
            // z = -G⁻¹ (a_q + Nᵀ r)
            let mut z = aq;
            for (k, &j) in active.iter().enumerate() {
                for d in 0..DIM {
                    z[d] += r[k] * rows[j].a[d];
                }
            }
            for d in 0..DIM {
                z[d] *= -h_inv[d];
            }
            let aq_scale: f64 = (0..DIM).map(|d| aq[d] * aq[d] * h_inv[d]).sum();
            let decrease = -dot(&aq, &z);
            // With DIM rows active every further row is dependent; testing
            // the rounding-level decrease instead could admit a fourth row
            // and leave a singular active set.
            let dependent = active.len() >= DIM || decrease <= 1e-10 * aq_scale;

            let mut t_dual = f64::INFINITY;
            let mut drop = None;
            for (k, &j) in active.iter().enumerate() {
                if r[k] < 0.0 {
                    let t = lambda[j] / -r[k];
                    if t < t_dual {
                        t_dual = t;
                        drop = Some(k);
                    }
                }
            }
            let t_primal = if dependent {
                f64::INFINITY
            } else {
                (-rows[q].slack(&x)).max(0.0) / decrease
            };
            if !t_dual.is_finite() && !t_primal.is_finite() {
                return Err(QpError::Infeasible);
            }
            let t = t_dual.min(t_primal);
            if !dependent {
                for d in 0..DIM {
                    x[d] += t * z[d];
                }
            }
            for (k, &j) in active.iter().enumerate() {
                lambda[j] = (lambda[j] + t * r[k]).max(0.0);
            }
            lambda[q] += t;
            if t_primal <= t_dual {
                active.push(q);
                break;
            }
            let k = drop.expect("finite dual step has a blocking index");
            lambda[active[k]] = 0.0;
            active.remove(k);
        }
    }

    polish(p, &rows, &active, &h_inv, &mut x, &mut lambda);
    let kkt_residual = kkt_residual(p, &rows, &x, &lambda);
    if kkt_residual > KKT_TOL {
        return Err(QpError::NumericalFailure {
            residual: kkt_residual,
        });
    }
    Ok(QpSolution {
        u: x,
        objective: p.objective(&x),
        kkt_residual,
        multipliers: lambda,
    })
}

/// Solve `(N G⁻¹ Nᵀ) r = -N G⁻¹ a_q` for the active rows `N`.
fn multiplier_direction(
    rows: &[Row],
    active: &[usize],
    h_inv: &[f64; DIM],
    aq: &[f64; DIM],
) -> Option<Vec<f64>> {
    let n = active.len();
    if n == 0 {
        return Some(Vec::new());
    }
    let mut mat = vec![vec![0.0; n]; n];
    let mut rhs = vec![0.0; n];
    for (i, &ri) in active.iter().enumerate() {
        for (j, &rj) in active.iter().enumerate() {
            mat[i][j] = (0..DIM).map(|d| rows[ri].a[d] * h_inv[d] * rows[rj].a[d]).sum();
        }
        rhs[i] = -(0..DIM).map(|d| rows[ri].a[d] * h_inv[d] * aq[d]).sum::<f64>();
    }
    solve_dense(mat, rhs)
}

/// Re-solve the equality-constrained subproblem on the final active set to
/// remove drift accumulated over the iterations.
fn polish(
    p: &QpProblem,
    rows: &[Row],
    active: &[usize],
    h_inv: &[f64; DIM],
    x: &mut [f64; DIM],
    lambda: &mut [f64],
) {
    let Some((xs, ls)) = equality_qp(p, rows, active, h_inv) else {
        return;
    };
    if ls.iter().all(|&l| l >= -1e-12) {
        *x = xs;
        for (k, &j) in active.iter().enumerate() {
            lambda[j] = ls[k].max(0.0);
        }
    }
}

/// Minimizer of the objective with the rows in `set` held at equality,
/// plus their multipliers. `None` if the rows are linearly dependent.
fn equality_qp(
    p: &QpProblem,
    rows: &[Row],
    set: &[usize],
    h_inv: &[f64; DIM],
) -> Option<([f64; DIM], Vec<f64>)> {
    let n = set.len();
    let mut lam = Vec::new();
    if n > 0 {
        let mut mat = vec![vec![0.0; n]; n];
        let mut rhs = vec![0.0; n];
        for (i, &ri) in set.iter().enumerate() {
            for (j, &rj) in set.iter().enumerate() {
                mat[i][j] = (0..DIM).map(|d| rows[ri].a[d] * h_inv[d] * rows[rj].a[d]).sum();
            }
            let gc: f64 = (0..DIM).map(|d| rows[ri].a[d] * h_inv[d] * p.linear[d]).sum();
            rhs[i] = -(rows[ri].b + gc);
        }
        lam = solve_dense(mat, rhs)?;
    }
    let mut x = [0.0; DIM];
    for d in 0..DIM {
        let mut g = p.linear[d];
        for (k, &j) in set.iter().enumerate() {
            g += lam[k] * rows[j].a[d];
        }
        x[d] = -h_inv[d] * g;
    }
    Some((x, lam))
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return None;
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= 1e-12 * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    Some(x)
}

/// KKT residual of `(x, λ)` against `rows`, all terms in absolute units.
pub fn kkt_residual(p: &QpProblem, rows: &[Row], x: &[f64; DIM], lambda: &[f64]) -> f64 {
    let mut grad = [0.0; DIM];
    for d in 0..DIM {
        grad[d] = p.hessian[d] * x[d] + p.linear[d];
    }
    let mut primal = 0.0f64;
    let mut comp = 0.0f64;
    let mut dual = 0.0f64;
    for (r, &l) in rows.iter().zip(lambda) {
        for d in 0..DIM {
            grad[d] += l * r.a[d];
        }
        let s = r.slack(x);
        primal = primal.max(-s);
        comp = comp.max((l * s).abs());
        dual = dual.max(-l);
    }
    let stat = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    stat.max(primal).max(comp).max(dual)
}

/// Minimizer, active set, multipliers and objective of one oracle candidate.
type Candidate = ([f64; DIM], Vec<usize>, Vec<f64>, f64);

/// Exact solution by enumerating every candidate active set of size at
/// most [`DIM`], solving each equality-constrained subproblem in closed
/// form and keeping the feasible candidate with the lowest objective.
pub fn enumeration_oracle(p: &QpProblem) -> Result<QpSolution, QpError> {
    p.validate()?;
    let rows = p.constraint_rows();
    let m = rows.len();
    if m > MAX_ORACLE_CONSTRAINTS {
        return Err(QpError::TooManyConstraints {
            max: MAX_ORACLE_CONSTRAINTS,
            got: m,
        });
    }
    let h_inv = p.hessian.map(|h| 1.0 / h);
    let mut best: Option<Candidate> = None;
    for mask in 0u32..(1 << m) {
        if mask.count_ones() as usize > DIM {
            continue;
        }
        let set: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let Some((x, lam)) = equality_qp(p, &rows, &set, &h_inv) else {
            continue;
        };
        let feasible = rows
            .iter()
            .all(|r| r.slack(&x) >= -1e-9 * (1.0 + r.b.abs()));
        if !feasible {
            continue;
        }
        let obj = p.objective(&x);
        if best.as_ref().is_none_or(|b| obj < b.3) {
            best = Some((x, set, lam, obj));
        }
    }
    let (x, set, lam, objective) = best.ok_or(QpError::Infeasible)?;
    let mut multipliers = vec![0.0; m];
    for (k, &j) in set.iter().enumerate() {
        multipliers[j] = lam[k];
    }
    Ok(QpSolution {
        u: x,
        objective,
        kkt_residual: kkt_residual(p, &rows, &x, &multipliers),
        multipliers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn control_box(p: QpProblem) -> QpProblem {
        p.with_bounds([-0.8, -0.8, 0.0], [0.8, 0.8, f64::INFINITY])
    }

    #[test]
    fn unconstrained_minimizer_inside_box() {
        let p = control_box(QpProblem::new([2.0, 2.0, 1.0], [-1.0, 0.0, 0.0]));
        let s = solve(&p).unwrap();
        assert!((s.u[0] - 0.5).abs() < 1e-12);
        assert!(s.u[1].abs() < 1e-12 && s.u[2].abs() < 1e-12);
    }

    #[test]
    fn single_active_row() {
        let mut p = control_box(QpProblem::new([2.0, 2.0, 1.0], [-1.6, 0.0, 0.0]));
        p.push_row([1.0, 0.0, 0.0], 0.0);
        let s = solve(&p).unwrap();
        let o = enumeration_oracle(&p).unwrap();
        for k in 0..DIM {
            assert!(s.u[k].abs() < 1e-12);
            assert!((s.u[k] - o.u[k]).abs() < 1e-9);
        }
        // Stationarity: 2·0 − 1.6 + λ = 0.
        assert!((s.multipliers[0] - 1.6).abs() < 1e-9);
    }

    #[test]
    fn contradictory_rows_are_infeasible() {
        let mut p = QpProblem::new([2.0, 2.0, 1.0], [0.0; 3]);
        p.push_row([1.0, 0.0, 0.0], -1.0);
        p.push_row([-1.0, 0.0, 0.0], -2.0);
        assert_eq!(solve(&p), Err(QpError::Infeasible));
        assert_eq!(enumeration_oracle(&p), Err(QpError::Infeasible));
    }

    #[test]
    fn infeasible_against_box() {
        let mut p = control_box(QpProblem::new([2.0, 2.0, 1.0], [0.0; 3]));
        p.push_row([-1.0, 0.0, 0.0], -1.0);
        assert_eq!(solve(&p), Err(QpError::Infeasible));
    }

    #[test]
    fn empty_problem_oracle_is_box_clamped() {
        let p = control_box(QpProblem::new([2.0, 2.0, 1.0], [-4.0, 4.0, 1.0]));
        let o = enumeration_oracle(&p).unwrap();
        assert_eq!(o.u, [0.8, -0.8, 0.0]);
        let s = solve(&p).unwrap();
        assert_eq!(s.u, [0.8, -0.8, 0.0]);
    }

    #[test]
    fn rejects_bad_hessian() {
        let p = QpProblem::new([2.0, 0.0, 1.0], [0.0; 3]);
        assert_eq!(solve(&p), Err(QpError::InvalidProblem));
    }

    #[test]
    fn duplicate_rows_are_handled() {
        let mut p = control_box(QpProblem::new([2.0, 2.0, 1.0], [-1.6, -1.6, 0.0]));
        for _ in 0..3 {
            p.push_row([1.0, 1.0, 0.0], 0.2);
        }
        let s = solve(&p).unwrap();
        let o = enumeration_oracle(&p).unwrap();
        assert!((s.objective - o.objective).abs() < 1e-9);
        assert!((s.u[0] - 0.1).abs() < 1e-9 && (s.u[1] - 0.1).abs() < 1e-9);
    }
}
