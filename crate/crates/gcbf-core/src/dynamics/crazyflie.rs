//! Crazyflie 6-DOF quadrotor: rigid-body dynamics, motor mixing, and the
//! two-level control architecture.
//!
//! State layout (12 entries):
//! `[p_x, p_y, p_z, u, v, w, phi, theta, psi, r, q, p]`
//! with `(u, v, w)` body-frame velocities, `(phi, theta, psi)` Euler angles
//! and `(r, q, p)` angular rates. The wrench is `U = (U1, U2, U3, U4)`:
//! total thrust plus three moments.
//!
//! The environment-level action is a 4-vector command: a body-frame
//! reference velocity and a yaw rate. An inner LQR about hover converts the
//! command into a wrench, so the commanded dynamics stay control-affine.

use nalgebra::{DMatrix, DVector};

use super::lqr::lqr_gain;
use super::DynamicsError;

/// Physical parameters of the Crazyflie 2.x airframe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrazyflieParams {
    /// Mass (kg).
    pub mass: f64,
    /// Roll/pitch-axis inertia (kg m^2).
    pub inertia_xx: f64,
    pub inertia_yy: f64,
    /// Yaw-axis inertia (kg m^2).
    pub inertia_zz: f64,
    /// Thrust coefficient (N/rpm^2).
    pub thrust_coeff: f64,
    /// Drag coefficient (N/rpm^2).
    pub drag_coeff: f64,
    /// Arm length (m).
    pub arm_len: f64,
    /// Gravitational acceleration (m/s^2).
    pub gravity: f64,
}

impl Default for CrazyflieParams {
    fn default() -> Self {
        Self {
            mass: 0.0299,
            inertia_xx: 1.395e-5,
            inertia_yy: 1.395e-5,
            inertia_zz: 2.173e-5,
            thrust_coeff: 3.1582e-10,
            drag_coeff: 7.9379e-12,
            arm_len: 0.03973,
            gravity: 9.8,
        }
    }
}

impl CrazyflieParams {
    pub fn hover_thrust(&self) -> f64 {
        self.mass * self.gravity
    }

    /// Wrench-from-squared-motor-speeds mixing matrix (4x4, row-major).
    pub fn mixing_matrix(&self) -> [[f64; 4]; 4] {
        let ct = self.thrust_coeff;
        let cd = self.drag_coeff;
        let dct = self.arm_len * ct * 2.0_f64.sqrt();
        [
            [ct, ct, ct, ct],
            [-dct, -dct, dct, dct],
            [-dct, dct, dct, -dct],
            [-cd, cd, -cd, cd],
        ]
    }
}

/// Margin kept from the `cos(theta) = 0` singularity of the Euler-rate map.
pub const PITCH_SINGULARITY_MARGIN: f64 = 1e-6;

/// Time derivative of the 12-state under a wrench `U = (U1..U4)`.
///
/// Errors when the pitch angle reaches the Euler-rate singularity.
pub fn wrench_derivative(
    params: &CrazyflieParams,
    x: &[f64],
    wrench: &[f64; 4],
) -> Result<[f64; 12], DynamicsError> {
    let [_, _, _, u, v, w, phi, theta, psi, r, q, p] = *x else {
        return Err(DynamicsError::BadStateDim { expected: 12, got: x.len() });
    };
    if theta.abs() >= std::f64::consts::FRAC_PI_2 - PITCH_SINGULARITY_MARGIN {
        return Err(DynamicsError::EulerSingularity { pitch: theta });
    }
    let g = params.gravity;
    let (s_phi, c_phi) = phi.sin_cos();
    let (s_th, c_th) = theta.sin_cos();
    let (s_psi, c_psi) = psi.sin_cos();
    let t_th = s_th / c_th;
    let [u1, u2, u3, u4] = *wrench;

    Ok([
        (c_phi * c_psi * s_th + s_phi * s_psi) * w - (s_psi * c_phi - c_psi * s_phi * s_th) * v
            + u * c_psi * c_th,
        (s_phi * s_psi * s_th + c_phi * c_psi) * v - (c_psi * s_phi - s_psi * c_phi * s_th) * w
            + u * s_psi * c_th,
        w * c_phi * c_th - u * s_th + v * s_phi * c_th,
        r * v - q * w + g * s_th,
        p * w - r * u - g * s_phi * c_th,
        q * u - p * v + u1 / params.mass - g * c_th * c_phi,
        r * c_phi / c_th + q * s_phi / c_th,
        q * c_phi - r * s_phi,
        p + r * c_phi * t_th + q * s_phi * t_th,
        (u2 - p * q * (params.inertia_yy - params.inertia_xx)) / params.inertia_zz,
        (u3 - p * r * (params.inertia_xx - params.inertia_zz)) / params.inertia_yy,
        (u4 - q * r * (params.inertia_zz - params.inertia_yy)) / params.inertia_xx,
    ])
}

/// World-frame velocity (the position rows of the dynamics), which does not
/// depend on the wrench.
pub fn world_velocity(x: &[f64]) -> [f64; 3] {
    let [u, v, w, phi, theta, psi] = [x[3], x[4], x[5], x[6], x[7], x[8]];
    let (s_phi, c_phi) = phi.sin_cos();
    let (s_th, c_th) = theta.sin_cos();
    let (s_psi, c_psi) = psi.sin_cos();
    [
        (c_phi * c_psi * s_th + s_phi * s_psi) * w - (s_psi * c_phi - c_psi * s_phi * s_th) * v
            + u * c_psi * c_th,
        (s_phi * s_psi * s_th + c_phi * c_psi) * v - (c_psi * s_phi - s_psi * c_phi * s_th) * w
            + u * s_psi * c_th,
        w * c_phi * c_th - u * s_th + v * s_phi * c_th,
    ]
}

/// Jacobian of [`world_velocity`] w.r.t. the 12-state (3x12, row-major).
pub fn world_velocity_jacobian(x: &[f64]) -> [[f64; 12]; 3] {
    let [u, v, w, phi, theta, psi] = [x[3], x[4], x[5], x[6], x[7], x[8]];
    let (s_phi, c_phi) = phi.sin_cos();
    let (s_th, c_th) = theta.sin_cos();
    let (s_psi, c_psi) = psi.sin_cos();
    let mut jac = [[0.0; 12]; 3];

    // Row 0: d p_x_dot.
    jac[0][3] = c_psi * c_th;
    jac[0][4] = -(s_psi * c_phi - c_psi * s_phi * s_th);
    jac[0][5] = c_phi * c_psi * s_th + s_phi * s_psi;
    jac[0][6] = (-s_phi * c_psi * s_th + c_phi * s_psi) * w
        - (-s_psi * s_phi - c_psi * c_phi * s_th) * v;
    jac[0][7] = c_phi * c_psi * c_th * w + c_psi * s_phi * c_th * v - u * c_psi * s_th;
    jac[0][8] = (-c_phi * s_psi * s_th + s_phi * c_psi) * w
        - (c_psi * c_phi + s_psi * s_phi * s_th) * v
        - u * s_psi * c_th;

    // Row 1: d p_y_dot.
    jac[1][3] = s_psi * c_th;
    jac[1][4] = s_phi * s_psi * s_th + c_phi * c_psi;
    jac[1][5] = -(c_psi * s_phi - s_psi * c_phi * s_th);
    jac[1][6] = (c_phi * s_psi * s_th - s_phi * c_psi) * v
        - (c_psi * c_phi + s_psi * s_phi * s_th) * w;
    jac[1][7] = s_phi * s_psi * c_th * v + s_psi * c_phi * c_th * w - u * s_psi * s_th;
    jac[1][8] = (s_phi * c_psi * s_th - c_phi * s_psi) * v
        - (-s_psi * s_phi - c_psi * c_phi * s_th) * w
        + u * c_psi * c_th;

    // Row 2: d p_z_dot.
    jac[2][3] = -s_th;
    jac[2][4] = s_phi * c_th;
    jac[2][5] = c_phi * c_th;
    jac[2][6] = -w * s_phi * c_th + v * c_phi * c_th;
    jac[2][7] = -w * c_phi * s_th - u * c_th - v * s_phi * s_th;
    jac[2][8] = 0.0;

    jac
}

/// Inner-loop LQR gains for the four decoupled hover chains, in the scaled
/// wrench units `(U1/m, U2/Izz, U3/Iyy, U4/Ixx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerLoopGains {
    /// Gain on `(u - u_ref, theta, q)` producing scaled U3.
    pub forward: [f64; 3],
    /// Gain on `(v - v_ref, phi, r)` producing scaled U2.
    pub lateral: [f64; 3],
    /// Gain on `(w - w_ref)` producing scaled U1 offset from hover.
    pub vertical: f64,
    /// Gain on `(p - p_ref)` producing scaled U4.
    pub yaw_rate: f64,
}

/// LQR weights for the hover chains; defaults give closed-loop poles a few
/// rad/s deep, well inside the Euler stability region at dt = 0.03.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerLoopWeights {
    pub q_velocity: f64,
    pub q_angle: f64,
    pub q_rate: f64,
    pub r_control: f64,
    pub q_vertical: f64,
    pub q_yaw_rate: f64,
}

impl Default for InnerLoopWeights {
    fn default() -> Self {
        Self {
            q_velocity: 20.0,
            q_angle: 100.0,
            q_rate: 1.0,
            r_control: 1.0,
            q_vertical: 25.0,
            q_yaw_rate: 25.0,
        }
    }
}

impl InnerLoopGains {
    pub fn design(params: &CrazyflieParams, weights: &InnerLoopWeights) -> Result<Self, DynamicsError> {
        let g = params.gravity;
        let q3 = DMatrix::from_diagonal(&DVector::from_column_slice(&[
            weights.q_velocity,
            weights.q_angle,
            weights.q_rate,
        ]));
        let b3 = DVector::from_column_slice(&[0.0, 0.0, 1.0]);

        // (u - u_ref, theta, q): u_dot = g*theta, theta_dot = q, q_dot = U3/Iyy.
        let a_fwd = DMatrix::from_row_slice(3, 3, &[0.0, g, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let k_fwd = lqr_gain(&a_fwd, &b3, &q3, weights.r_control)?;

        // (v - v_ref, phi, r): v_dot = -g*phi, phi_dot = r, r_dot = U2/Izz.
        let a_lat = DMatrix::from_row_slice(3, 3, &[0.0, -g, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let k_lat = lqr_gain(&a_lat, &b3, &q3, weights.r_control)?;

        let a1 = DMatrix::from_row_slice(1, 1, &[0.0]);
        let b1 = DVector::from_column_slice(&[1.0]);
        let k_vert = lqr_gain(
            &a1,
            &b1,
            &DMatrix::from_row_slice(1, 1, &[weights.q_vertical]),
            weights.r_control,
        )?;
        let k_yaw = lqr_gain(
            &a1,
            &b1,
            &DMatrix::from_row_slice(1, 1, &[weights.q_yaw_rate]),
            weights.r_control,
        )?;

        Ok(Self {
            forward: [k_fwd[0], k_fwd[1], k_fwd[2]],
            lateral: [k_lat[0], k_lat[1], k_lat[2]],
            vertical: k_vert[0],
            yaw_rate: k_yaw[0],
        })
    }

    /// Wrench tracking a body-frame velocity / yaw-rate command.
    ///
    /// Affine in `cmd`, which keeps the commanded dynamics control-affine.
    pub fn wrench(&self, params: &CrazyflieParams, x: &[f64], cmd: &[f64; 4]) -> [f64; 4] {
        let [u, v, w] = [x[3], x[4], x[5]];
        let [phi, theta] = [x[6], x[7]];
        let [r, q, p] = [x[9], x[10], x[11]];
        let [u_ref, v_ref, w_ref, p_ref] = *cmd;

        let u1 = params.mass * (params.gravity - self.vertical * (w - w_ref));
        let u2 = -params.inertia_zz
            * (self.lateral[0] * (v - v_ref) + self.lateral[1] * phi + self.lateral[2] * r);
        let u3 = -params.inertia_yy
            * (self.forward[0] * (u - u_ref) + self.forward[1] * theta + self.forward[2] * q);
        let u4 = -params.inertia_xx * self.yaw_rate * (p - p_ref);
        [u1, u2, u3, u4]
    }

    /// `d wrench / d cmd`: constant 4x4, one nonzero per row.
    pub fn wrench_cmd_jacobian(&self, params: &CrazyflieParams) -> [[f64; 4]; 4] {
        let mut j = [[0.0; 4]; 4];
        j[0][2] = params.mass * self.vertical;
        j[1][1] = params.inertia_zz * self.lateral[0];
        j[2][0] = params.inertia_yy * self.forward[0];
        j[3][3] = params.inertia_xx * self.yaw_rate;
        j
    }
}

/// Squared motor speeds realizing a wrench. `saturated` marks any negative
/// squared speed (the wrench is outside the motor envelope); values are
/// reported unclipped so the caller can decide.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotorSolution {
    pub speeds_squared: [f64; 4],
    pub saturated: bool,
}

/// Invert the mixing matrix: wrench -> squared motor speeds.
pub fn motor_mixing(params: &CrazyflieParams, wrench: &[f64; 4]) -> MotorSolution {
    let m = params.mixing_matrix();
    let mat = DMatrix::from_fn(4, 4, |i, j| m[i][j]);
    let rhs = DVector::from_column_slice(wrench);
    // Constant full-rank matrix; LU cannot fail here.
    let sol = mat.lu().solve(&rhs).expect("mixing matrix is invertible");
    let speeds = [sol[0], sol[1], sol[2], sol[3]];
    MotorSolution {
        speeds_squared: speeds,
        saturated: speeds.iter().any(|&s| s < 0.0),
    }
}

/// Forward mixing: squared motor speeds -> wrench.
pub fn wrench_from_motors(params: &CrazyflieParams, speeds_squared: &[f64; 4]) -> [f64; 4] {
    let m = params.mixing_matrix();
    let mut out = [0.0; 4];
    for (row, o) in m.iter().zip(out.iter_mut()) {
        *o = row.iter().zip(speeds_squared).map(|(a, b)| a * b).sum();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hover_state() -> Vec<f64> {
        vec![0.0; 12]
    }

    #[test]
    fn hover_wrench_balances_gravity() {
        let params = CrazyflieParams::default();
        let gains = InnerLoopGains::design(&params, &InnerLoopWeights::default()).unwrap();
        let w = gains.wrench(&params, &hover_state(), &[0.0; 4]);
        assert!((w[0] - 0.293).abs() < 5e-4, "U1 = {}", w[0]);
        assert_eq!(&w[1..], &[0.0, 0.0, 0.0]);
        let dx = wrench_derivative(&params, &hover_state(), &w).unwrap();
        assert!(dx.iter().all(|v| v.abs() < 1e-12), "hover is an equilibrium: {dx:?}");
    }

    #[test]
    fn mixing_round_trips() {
        let params = CrazyflieParams::default();
        let wrench = [0.3, 1e-4, -2e-4, 5e-6];
        let motors = motor_mixing(&params, &wrench);
        let back = wrench_from_motors(&params, &motors.speeds_squared);
        for (a, b) in wrench.iter().zip(&back) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn equal_motor_speeds_give_pure_thrust() {
        let params = CrazyflieParams::default();
        let w = wrench_from_motors(&params, &[1e6; 4]);
        assert!((w[1]).abs() < 1e-12 && (w[2]).abs() < 1e-12 && (w[3]).abs() < 1e-12);
        assert!(w[0] > 0.0);
    }

    #[test]
    fn negative_squared_speed_flags_saturation() {
        let params = CrazyflieParams::default();
        // A pure moment with no thrust needs a negative squared speed.
        let motors = motor_mixing(&params, &[0.0, 1e-3, 0.0, 0.0]);
        assert!(motors.saturated);
    }

    #[test]
    fn pitch_singularity_is_an_error() {
        let params = CrazyflieParams::default();
        let mut x = hover_state();
        x[7] = std::f64::consts::FRAC_PI_2;
        let err = wrench_derivative(&params, &x, &[0.3, 0.0, 0.0, 0.0]);
        assert!(matches!(err, Err(DynamicsError::EulerSingularity { .. })));
    }

    #[test]
    fn world_velocity_jacobian_matches_finite_differences() {
        let x = vec![
            0.1, -0.2, 0.3, 0.15, -0.05, 0.2, 0.1, -0.2, 0.3, 0.05, -0.02, 0.04,
        ];
        let jac = world_velocity_jacobian(&x);
        let h = 1e-7;
        for col in 0..12 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[col] += h;
            xm[col] -= h;
            let vp = world_velocity(&xp);
            let vm = world_velocity(&xm);
            for row in 0..3 {
                let fd = (vp[row] - vm[row]) / (2.0 * h);
                assert!(
                    (fd - jac[row][col]).abs() < 1e-6,
                    "d v[{row}]/d x[{col}]: fd {fd} vs analytic {}",
                    jac[row][col]
                );
            }
        }
    }
}
