//! Reference QP solution by projected gradient descent.
//!
//! An independent path used to cross-check the active-set solver: gradient
//! steps on the objective with projection onto the feasible set, the
//! projection itself computed by Dykstra's alternating method over the box
//! and the individual halfspaces. First-order and factorization-free, so it
//! shares nothing with the main solver.

use super::solver::QpProblem;

/// Projected-gradient solve to a loose first-order tolerance. Assumes the
/// problem is feasible.
pub fn projected_gradient_solve(problem: &QpProblem, iterations: usize) -> Vec<f64> {
    let n = problem.dim();
    // Conservative step from a Gershgorin bound on the Hessian spectrum.
    let mut lmax: f64 = 0.0;
    for i in 0..n {
        let row_sum: f64 = (0..n).map(|j| problem.hessian[(i, j)].abs()).sum();
        lmax = lmax.max(row_sum);
    }
    let step = 1.0 / lmax.max(1e-12);

    let mut u = project(problem, &vec![0.0; n]);
    for _ in 0..iterations {
        let mut grad = problem.linear.clone();
        for i in 0..n {
            for j in 0..n {
                grad[i] += problem.hessian[(i, j)] * u[j];
            }
        }
        let candidate: Vec<f64> = u.iter().zip(&grad).map(|(x, g)| x - step * g).collect();
        u = project(problem, &candidate);
    }
    u
}

/// Euclidean projection onto `{lo <= u <= hi, a_k'u >= b_k}` by Dykstra's
/// algorithm over the individual convex pieces.
pub fn project(problem: &QpProblem, point: &[f64]) -> Vec<f64> {
    let n = problem.dim();
    let sets = problem.rows.len() + 1;
    let mut x = point.to_vec();
    let mut corrections = vec![vec![0.0; n]; sets];
    for _ in 0..400 {
        let before = x.clone();
        for (s, corr) in corrections.iter_mut().enumerate() {
            let y: Vec<f64> = x.iter().zip(corr.iter()).map(|(v, c)| v + c).collect();
            let projected = if s == 0 {
                y.iter()
                    .enumerate()
                    .map(|(i, &v)| v.clamp(problem.lower[i], problem.upper[i]))
                    .collect()
            } else {
                project_halfspace(&y, &problem.rows[s - 1].coeffs, problem.rows[s - 1].rhs)
            };
            for i in 0..n {
                corr[i] = y[i] - projected[i];
            }
            x = projected;
        }
        let delta: f64 = x.iter().zip(&before).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if delta < 1e-14 {
            break;
        }
    }
    x
}

fn project_halfspace(y: &[f64], a: &[f64], b: f64) -> Vec<f64> {
    let dot: f64 = a.iter().zip(y).map(|(ai, yi)| ai * yi).sum();
    if dot >= b {
        return y.to_vec();
    }
    let norm2: f64 = a.iter().map(|ai| ai * ai).sum();
    if norm2 == 0.0 {
        return y.to_vec();
    }
    let scale = (b - dot) / norm2;
    y.iter().zip(a).map(|(yi, ai)| yi + scale * ai).collect()
}

#[cfg(test)]
mod tests {
    use super::super::solver::{solve_qp, QpProblem, QpRow};
    use super::*;

    #[test]
    fn matches_active_set_on_halfspace() {
        let p = QpProblem::tracking(
            &[0.0, 0.0],
            vec![QpRow { coeffs: vec![1.0, 1.0], rhs: 1.0 }],
            vec![-2.0; 2],
            vec![2.0; 2],
        );
        let pg = projected_gradient_solve(&p, 3000);
        let asq = solve_qp(&p).unwrap();
        let gap = (p.objective(&pg) - p.objective(&asq.point)).abs();
        assert!(gap < 1e-6, "objective gap {gap}");
    }

    #[test]
    fn projection_lands_in_feasible_set() {
        let p = QpProblem::tracking(
            &[0.0, 0.0],
            vec![QpRow { coeffs: vec![1.0, 2.0], rhs: 1.5 }],
            vec![-1.0; 2],
            vec![1.0; 2],
        );
        let x = project(&p, &[-1.0, -1.0]);
        let dot = x[0] + 2.0 * x[1];
        assert!(dot >= 1.5 - 1e-9, "row value {dot}");
        assert!(x.iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
    }
}
