//! Dense strictly convex QP solver.
//!
//! Solves `min 1/2 u'Hu + f'u  s.t.  a_k'u >= b_k, lo <= u <= hi` with a
//! Goldfarb-Idnani dual active-set iteration: start from the unconstrained
//! minimum, repeatedly add the most violated constraint, dropping blocking
//! active constraints along the way. Subproblems are solved by direct
//! factorization, which is plenty at the problem sizes here (tens of
//! variables).

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// One linear inequality `coeffs' u >= rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpRow {
    pub coeffs: Vec<f64>,
    pub rhs: f64,
}

/// A box-and-rows QP instance. The Hessian must be symmetric positive
/// definite; infinite bounds are allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear: Vec<f64>,
    pub rows: Vec<QpRow>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl QpProblem {
    /// `min sum ||u - target||^2` subject to rows and box: `H = 2I`,
    /// `f = -2 target`.
    pub fn tracking(target: &[f64], rows: Vec<QpRow>, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        let n = target.len();
        Self {
            hessian: DMatrix::identity(n, n) * 2.0,
            linear: target.iter().map(|t| -2.0 * t).collect(),
            rows,
            lower,
            upper,
        }
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, u: &[f64]) -> f64 {
        let v = DVector::from_column_slice(u);
        (0.5 * v.transpose() * &self.hessian * &v)[(0, 0)]
            + self.linear.iter().zip(u).map(|(f, x)| f * x).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    IterationLimit,
}

/// Worst-case KKT residuals of a candidate solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub point: Vec<f64>,
    pub status: QpStatus,
    /// Active constraint indices in the solver's combined ordering: general
    /// rows first, then lower bounds, then upper bounds.
    pub active_set: Vec<usize>,
    /// Dual values for the general rows.
    pub row_duals: Vec<f64>,
    pub kkt: KktResiduals,
    pub iterations: usize,
}

const VIOLATION_TOL: f64 = 1e-11;
const DIRECTION_TOL: f64 = 1e-12;

/// Solve the QP. Returns `Infeasible` status when the constraints admit no
/// point (callers relax with slacks), `IterationLimit` past `100 * dim`
/// iterations.
pub fn solve_qp(problem: &QpProblem) -> Result<QpSolution, QpError> {
    let n = problem.dim();
    if problem.hessian.nrows() != n || problem.hessian.ncols() != n {
        return Err(QpError::Dimension(format!(
            "hessian {}x{}, {} variables",
            problem.hessian.nrows(),
            problem.hessian.ncols(),
            n
        )));
    }
    for (k, row) in problem.rows.iter().enumerate() {
        if row.coeffs.len() != n {
            return Err(QpError::Dimension(format!("row {k} has {} coeffs", row.coeffs.len())));
        }
    }
    let chol = problem
        .hessian
        .clone()
        .cholesky()
        .ok_or(QpError::NotPositiveDefinite)?;

    // Combined constraint list: general rows, then finite lower bounds, then
    // finite upper bounds (as -u >= -hi).
    let mut normals: Vec<DVector<f64>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    for row in &problem.rows {
        normals.push(DVector::from_column_slice(&row.coeffs));
        rhs.push(row.rhs);
    }
    for (i, &lo) in problem.lower.iter().enumerate() {
        if lo.is_finite() {
            let mut a = DVector::zeros(n);
            a[i] = 1.0;
            normals.push(a);
            rhs.push(lo);
        }
    }
    for (i, &hi) in problem.upper.iter().enumerate() {
        if hi.is_finite() {
            let mut a = DVector::zeros(n);
            a[i] = -1.0;
            normals.push(a);
            rhs.push(-hi);
        }
    }

    let mut u = chol.solve(&-DVector::from_column_slice(&problem.linear));
    let mut active: Vec<usize> = Vec::new();
    let mut duals: Vec<f64> = Vec::new();
    let cap = 100 * n.max(1);
    let mut iterations = 0;
    let mut status = QpStatus::IterationLimit;

    'outer: while iterations < cap {
        iterations += 1;
        // Most violated constraint.
        let mut worst = VIOLATION_TOL;
        let mut candidate = None;
        for (k, a) in normals.iter().enumerate() {
            if active.contains(&k) {
                continue;
            }
            let s = rhs[k] - a.dot(&u);
            if s > worst {
                worst = s;
                candidate = Some(k);
            }
        }
        let Some(v) = candidate else {
            status = QpStatus::Optimal;
            break;
        };
        let a_v = normals[v].clone();
        let mut lambda_v = 0.0;

        loop {
            iterations += 1;
            if iterations >= cap {
                break 'outer;
            }
            let hinv_a = chol.solve(&a_v);
            let (z, r) = if active.is_empty() {
                (hinv_a.clone(), DVector::zeros(0))
            } else {
                let m = active.len();
                let mut aw = DMatrix::zeros(m, n);
                for (row, &k) in active.iter().enumerate() {
                    aw.set_row(row, &normals[k].transpose());
                }
                let hinv_awt = chol.solve(&aw.transpose());
                let gram = &aw * &hinv_awt;
                let r = gram
                    .clone()
                    .lu()
                    .solve(&(&aw * &hinv_a))
                    .unwrap_or_else(|| DVector::zeros(m));
                let z = &hinv_a - &hinv_awt * &r;
                (z, r)
            };

            let s_v = rhs[v] - a_v.dot(&u);
            if s_v <= VIOLATION_TOL {
                // Already satisfied after dual adjustments.
                if lambda_v > 0.0 {
                    active.push(v);
                    duals.push(lambda_v);
                }
                continue 'outer;
            }

            let a_dot_z = a_v.dot(&z);
            let t1 = if a_dot_z > DIRECTION_TOL { s_v / a_dot_z } else { f64::INFINITY };
            let mut t2 = f64::INFINITY;
            let mut blocking = None;
            for (j, &rv) in r.iter().enumerate() {
                if rv > DIRECTION_TOL {
                    let ratio = duals[j] / rv;
                    if ratio < t2 {
                        t2 = ratio;
                        blocking = Some(j);
                    }
                }
            }

            if t1.is_infinite() && t2.is_infinite() {
                status = QpStatus::Infeasible;
                break 'outer;
            }
            let t = t1.min(t2);
            if t1.is_finite() {
                u += &z * t;
            }
            for (j, &rv) in r.iter().enumerate() {
                duals[j] -= t * rv;
            }
            lambda_v += t;

            if t1 <= t2 {
                active.push(v);
                duals.push(lambda_v);
                continue 'outer;
            }
            let j = blocking.expect("t2 finite implies a blocking index");
            active.remove(j);
            duals.remove(j);
        }
    }

    let point: Vec<f64> = u.iter().copied().collect();
    let mut row_duals = vec![0.0; problem.rows.len()];
    for (&k, &l) in active.iter().zip(&duals) {
        if k < problem.rows.len() {
            row_duals[k] = l;
        }
    }
    let kkt = kkt_residuals(problem, &point, &normals, &rhs, &active, &duals);
    Ok(QpSolution { point, status, active_set: active, row_duals, kkt, iterations })
}

fn kkt_residuals(
    problem: &QpProblem,
    u: &[f64],
    normals: &[DVector<f64>],
    rhs: &[f64],
    active: &[usize],
    duals: &[f64],
) -> KktResiduals {
    let n = problem.dim();
    let uv = DVector::from_column_slice(u);
    let mut grad = &problem.hessian * &uv + DVector::from_column_slice(&problem.linear);
    let mut dual = 0.0_f64;
    for (&k, &l) in active.iter().zip(duals) {
        grad -= &normals[k] * l;
        dual = dual.max(-l);
    }
    let stationarity = grad.amax();
    let mut primal = 0.0_f64;
    let mut complementarity = 0.0_f64;
    for (k, a) in normals.iter().enumerate() {
        let slack = a.dot(&uv) - rhs[k];
        primal = primal.max(-slack);
        if let Some(pos) = active.iter().position(|&x| x == k) {
            complementarity = complementarity.max((duals[pos] * slack).abs());
        }
    }
    let _ = n;
    KktResiduals { stationarity, primal, dual, complementarity }
}

/// Outcome of a slack-relaxed solve.
#[derive(Debug, Clone)]
pub struct RelaxedSolution {
    pub point: Vec<f64>,
    /// Slack used per general row.
    pub slacks: Vec<f64>,
    pub max_slack: f64,
}

/// Quadratic slack penalty weight used when a QP is infeasible.
pub const SLACK_PENALTY: f64 = 1e3;

/// Re-solve with one nonnegative slack per general row, penalized by
/// `SLACK_PENALTY * s^2`; the box stays hard. Always feasible.
pub fn solve_relaxed(problem: &QpProblem) -> Result<RelaxedSolution, QpError> {
    let n = problem.dim();
    let k = problem.rows.len();
    let mut hessian = DMatrix::zeros(n + k, n + k);
    hessian.view_mut((0, 0), (n, n)).copy_from(&problem.hessian);
    for j in 0..k {
        hessian[(n + j, n + j)] = 2.0 * SLACK_PENALTY;
    }
    let mut linear = problem.linear.clone();
    linear.extend(std::iter::repeat_n(0.0, k));
    let rows = problem
        .rows
        .iter()
        .enumerate()
        .map(|(j, row)| {
            let mut coeffs = row.coeffs.clone();
            coeffs.extend(std::iter::repeat_n(0.0, k));
            coeffs[n + j] = 1.0;
            QpRow { coeffs, rhs: row.rhs }
        })
        .collect();
    let mut lower = problem.lower.clone();
    lower.extend(std::iter::repeat_n(0.0, k));
    let mut upper = problem.upper.clone();
    upper.extend(std::iter::repeat_n(f64::INFINITY, k));

    let extended = QpProblem { hessian, linear, rows, lower, upper };
    let sol = solve_qp(&extended)?;
    let slacks: Vec<f64> = sol.point[n..].to_vec();
    let max_slack = slacks.iter().copied().fold(0.0, f64::max);
    Ok(RelaxedSolution { point: sol.point[..n].to_vec(), slacks, max_slack })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn box_problem(target: &[f64]) -> QpProblem {
        let n = target.len();
        QpProblem::tracking(target, vec![], vec![-1.0; n], vec![1.0; n])
    }

    #[test]
    fn unconstrained_minimum_is_target() {
        let p = QpProblem::tracking(&[0.3, -0.4], vec![], vec![f64::NEG_INFINITY; 2], vec![f64::INFINITY; 2]);
        let sol = solve_qp(&p).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.point[0] - 0.3).abs() < 1e-12);
        assert!((sol.point[1] + 0.4).abs() < 1e-12);
    }

    #[test]
    fn box_only_is_componentwise_clamp() {
        let sol = solve_qp(&box_problem(&[2.0, -0.5, -3.0])).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        let expect = [1.0, -0.5, -1.0];
        for (a, b) in sol.point.iter().zip(expect) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(sol.kkt.max() < 1e-8);
    }

    #[test]
    fn halfspace_projection() {
        // min ||u||^2 s.t. u1 + u2 >= 1 has solution (0.5, 0.5).
        let p = QpProblem::tracking(
            &[0.0, 0.0],
            vec![QpRow { coeffs: vec![1.0, 1.0], rhs: 1.0 }],
            vec![f64::NEG_INFINITY; 2],
            vec![f64::INFINITY; 2],
        );
        let sol = solve_qp(&p).unwrap();
        assert!((sol.point[0] - 0.5).abs() < 1e-10);
        assert!((sol.point[1] - 0.5).abs() < 1e-10);
        assert!(sol.kkt.max() < 1e-8);
    }

    #[test]
    fn infeasible_is_detected_and_relaxation_recovers() {
        // u >= 2 with u <= 1 cannot hold.
        let p = QpProblem::tracking(
            &[0.0],
            vec![QpRow { coeffs: vec![1.0], rhs: 2.0 }],
            vec![-1.0],
            vec![1.0],
        );
        let sol = solve_qp(&p).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
        let relaxed = solve_relaxed(&p).unwrap();
        assert!(relaxed.max_slack > 0.9, "slack {}", relaxed.max_slack);
        assert!(relaxed.point[0] <= 1.0 + 1e-9);
    }

    #[test]
    fn crossing_constraints() {
        // Two rows active at once.
        let p = QpProblem::tracking(
            &[0.0, 0.0],
            vec![
                QpRow { coeffs: vec![1.0, 0.0], rhs: 0.4 },
                QpRow { coeffs: vec![0.0, 1.0], rhs: 0.7 },
            ],
            vec![-1.0; 2],
            vec![1.0; 2],
        );
        let sol = solve_qp(&p).unwrap();
        assert!((sol.point[0] - 0.4).abs() < 1e-10);
        assert!((sol.point[1] - 0.7).abs() < 1e-10);
        assert!(sol.kkt.max() < 1e-8);
    }
}
