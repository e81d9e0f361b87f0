//! Continuous-time LQR for the small single-input chains used by the
//! nominal controllers and the quadrotor inner loop.
//!
//! The algebraic Riccati equation is solved by Kleinman-Newton iteration
//! seeded with an Ackermann pole placement, which is enough for controllable
//! single-input systems of dimension <= 4.

use nalgebra::{DMatrix, DVector};

use super::DynamicsError;

/// Solve `A'P + PA - P b r^-1 b' P + Q = 0` and return the gain
/// `K = r^-1 b' P` for the single-input system `(A, b)`.
pub fn lqr_gain(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    q: &DMatrix<f64>,
    r: f64,
) -> Result<DVector<f64>, DynamicsError> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n);
    assert_eq!(b.len(), n);
    assert!(r > 0.0);

    let mut k = ackermann(a, b)?;
    let mut p_prev: Option<DMatrix<f64>> = None;
    for _ in 0..100 {
        // A_cl'P + P A_cl = -(Q + K'RK)
        let a_cl = a - b * k.transpose();
        let m = q + &k * k.transpose() * r;
        let p = solve_lyapunov(&a_cl.transpose(), &m)?;
        let k_next = (b.transpose() * &p).transpose() / r;
        let diff = (&k_next - &k).amax();
        k = k_next;
        if diff < 1e-13 {
            if let Some(prev) = &p_prev {
                if (&p - prev).amax() < 1e-12 {
                    return Ok(k);
                }
            }
            p_prev = Some(p);
        }
    }
    Ok(k)
}

/// Solve `F P + P F' = -M` for symmetric `M` via the Kronecker system.
fn solve_lyapunov(f: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<DMatrix<f64>, DynamicsError> {
    let n = f.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let lhs = eye.kronecker(f) + f.kronecker(&eye);
    let rhs = DVector::from_column_slice((-m).as_slice());
    let sol = lhs
        .lu()
        .solve(&rhs)
        .ok_or(DynamicsError::RiccatiFailed)?;
    Ok(DMatrix::from_column_slice(n, n, sol.as_slice()))
}

/// Pole placement at `-1, -2, ..., -n` to get a stabilizing initial gain.
fn ackermann(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
    let n = a.nrows();
    let mut ctrb = DMatrix::<f64>::zeros(n, n);
    let mut col = b.clone();
    for j in 0..n {
        ctrb.set_column(j, &col);
        col = a * col;
    }
    let inv = ctrb.try_inverse().ok_or(DynamicsError::RiccatiFailed)?;

    // chi(A) for poles -1..-n, built by repeated multiplication.
    let mut chi = DMatrix::<f64>::identity(n, n);
    for pole in 1..=n {
        chi = &chi * (a + DMatrix::<f64>::identity(n, n) * pole as f64);
    }
    let last_row = inv.row(n - 1).transpose();
    Ok((chi.transpose() * last_row).column(0).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn double_integrator_gain_matches_hand_riccati() {
        // For A=[[0,1],[0,0]], b=[0,1]', Q=I, r=1 the Riccati solution gives
        // K = [1, sqrt(3)].
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DVector::from_column_slice(&[0.0, 1.0]);
        let q = DMatrix::identity(2, 2);
        let k = lqr_gain(&a, &b, &q, 1.0).unwrap();
        assert!((k[0] - 1.0).abs() < 1e-9, "k0 {}", k[0]);
        assert!((k[1] - 3.0_f64.sqrt()).abs() < 1e-9, "k1 {}", k[1]);
    }

    #[test]
    fn scalar_chain() {
        // A=0, b=1, Q=q, r=1 gives K = sqrt(q).
        let a = DMatrix::from_row_slice(1, 1, &[0.0]);
        let b = DVector::from_column_slice(&[1.0]);
        let q = DMatrix::from_row_slice(1, 1, &[25.0]);
        let k = lqr_gain(&a, &b, &q, 1.0).unwrap();
        assert!((k[0] - 5.0).abs() < 1e-9);
    }

    #[test]
    fn closed_loop_is_stable() {
        let a = DMatrix::from_row_slice(3, 3, &[0.0, 9.8, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let b = DVector::from_column_slice(&[0.0, 0.0, 1.0]);
        let q = DMatrix::from_diagonal(&DVector::from_column_slice(&[20.0, 100.0, 1.0]));
        let k = lqr_gain(&a, &b, &q, 1.0).unwrap();
        let a_cl = &a - &b * k.transpose();
        let eigs = a_cl.complex_eigenvalues();
        for e in eigs.iter() {
            assert!(e.re < 0.0, "unstable eigenvalue {e}");
        }
    }
}
