//! Agent dynamics: five environment models, control limits, explicit Euler
//! stepping, and per-environment nominal goal-reaching controllers.
//!
//! All models are control-affine, `x_dot = f(x) + g(x) u`. States are plain
//! `Vec<f64>` with the environment fixing the layout; positions are always
//! the first `pos_dim` entries. Angles are stored unwrapped; they are only
//! normalized where a controller or feature encoding needs it.

mod crazyflie;
mod lqr;

pub use crazyflie::{
    motor_mixing, wrench_derivative, wrench_from_motors, world_velocity,
    world_velocity_jacobian, CrazyflieParams, InnerLoopGains, InnerLoopWeights, MotorSolution,
    PITCH_SINGULARITY_MARGIN,
};
pub use lqr::lqr_gain;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default simulation time step (s).
pub const DEFAULT_DT: f64 = 0.03;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("state has {got} entries, expected {expected}")]
    BadStateDim { expected: usize, got: usize },
    #[error("control has {got} entries, expected {expected}")]
    BadControlDim { expected: usize, got: usize },
    #[error("Euler-rate singularity: pitch {pitch} too close to pi/2")]
    EulerSingularity { pitch: f64 },
    #[error("Riccati iteration failed to converge")]
    RiccatiFailed,
}

/// The five agent models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    SingleIntegrator,
    DoubleIntegrator,
    DubinsCar,
    LinearDrone,
    CrazyflieDrone,
}

impl EnvKind {
    pub const ALL: [EnvKind; 5] = [
        EnvKind::SingleIntegrator,
        EnvKind::DoubleIntegrator,
        EnvKind::DubinsCar,
        EnvKind::LinearDrone,
        EnvKind::CrazyflieDrone,
    ];

    pub fn state_dim(self) -> usize {
        match self {
            EnvKind::SingleIntegrator => 2,
            EnvKind::DoubleIntegrator | EnvKind::DubinsCar => 4,
            EnvKind::LinearDrone => 6,
            EnvKind::CrazyflieDrone => 12,
        }
    }

    pub fn control_dim(self) -> usize {
        match self {
            EnvKind::SingleIntegrator | EnvKind::DoubleIntegrator | EnvKind::DubinsCar => 2,
            EnvKind::LinearDrone => 3,
            EnvKind::CrazyflieDrone => 4,
        }
    }

    /// Workspace dimension (2D or 3D).
    pub fn pos_dim(self) -> usize {
        match self {
            EnvKind::SingleIntegrator | EnvKind::DoubleIntegrator | EnvKind::DubinsCar => 2,
            EnvKind::LinearDrone | EnvKind::CrazyflieDrone => 3,
        }
    }

    /// Dimension of the per-edge relative feature.
    pub fn edge_dim(self) -> usize {
        match self {
            EnvKind::SingleIntegrator => 2,
            EnvKind::DoubleIntegrator | EnvKind::DubinsCar => 4,
            EnvKind::LinearDrone | EnvKind::CrazyflieDrone => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::SingleIntegrator => "single_integrator",
            EnvKind::DoubleIntegrator => "double_integrator",
            EnvKind::DubinsCar => "dubins_car",
            EnvKind::LinearDrone => "linear_drone",
            EnvKind::CrazyflieDrone => "crazyflie_drone",
        }
    }
}

impl std::str::FromStr for EnvKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EnvKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown environment `{s}`"))
    }
}

/// Box actuation limits `u_lo <= u <= u_hi`, componentwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlLimits {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ControlLimits {
    pub fn symmetric(dim: usize, bound: f64) -> Self {
        Self { lo: vec![-bound; dim], hi: vec![bound; dim] }
    }

    pub fn clamp(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(&v, (&lo, &hi))| v.clamp(lo, hi))
            .collect()
    }
}

/// An environment: model kind, physical parameters, actuation limits, and
/// precomputed controller gains.
#[derive(Debug, Clone)]
pub struct Env {
    pub kind: EnvKind,
    pub limits: ControlLimits,
    /// Cruise-speed cap for the Dubins car nominal controller.
    pub dubins_speed_max: f64,
    pub crazyflie: CrazyflieParams,
    crazyflie_gains: Option<InnerLoopGains>,
    /// (p - p_goal, v) feedback gain per axis for the double integrator.
    di_gain: [f64; 2],
    /// Per-axis gains for the linear drone (xy damping 1.1, z damping 6).
    ld_gain_xy: [f64; 2],
    ld_gain_z: [f64; 2],
}

impl Env {
    /// Environment with default limits (unit boxes) and default gains.
    pub fn new(kind: EnvKind) -> Result<Self, DynamicsError> {
        Self::with_limits(kind, ControlLimits::symmetric(kind.control_dim(), 1.0))
    }

    pub fn with_limits(kind: EnvKind, limits: ControlLimits) -> Result<Self, DynamicsError> {
        if limits.lo.len() != kind.control_dim() || limits.hi.len() != kind.control_dim() {
            return Err(DynamicsError::BadControlDim {
                expected: kind.control_dim(),
                got: limits.lo.len(),
            });
        }
        let crazyflie = CrazyflieParams::default();
        let crazyflie_gains = if kind == EnvKind::CrazyflieDrone {
            Some(InnerLoopGains::design(&crazyflie, &InnerLoopWeights::default())?)
        } else {
            None
        };
        Ok(Self {
            kind,
            limits,
            dubins_speed_max: 1.0,
            crazyflie,
            crazyflie_gains,
            di_gain: lqr_axis_gain(0.0, 1.0)?,
            ld_gain_xy: lqr_axis_gain(1.1, 1.1)?,
            ld_gain_z: lqr_axis_gain(6.0, 6.0)?,
        })
    }

    pub fn crazyflie_gains(&self) -> &InnerLoopGains {
        self.crazyflie_gains
            .as_ref()
            .expect("crazyflie gains only exist for the crazyflie environment")
    }

    fn check_state(&self, x: &[f64]) -> Result<(), DynamicsError> {
        if x.len() != self.kind.state_dim() {
            return Err(DynamicsError::BadStateDim { expected: self.kind.state_dim(), got: x.len() });
        }
        Ok(())
    }

    fn check_control(&self, u: &[f64]) -> Result<(), DynamicsError> {
        if u.len() != self.kind.control_dim() {
            return Err(DynamicsError::BadControlDim {
                expected: self.kind.control_dim(),
                got: u.len(),
            });
        }
        Ok(())
    }

    /// `x_dot = f(x) + g(x) u`. The control is used as given (callers clamp).
    pub fn derivative(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        self.check_state(x)?;
        self.check_control(u)?;
        Ok(match self.kind {
            EnvKind::SingleIntegrator => vec![u[0], u[1]],
            EnvKind::DoubleIntegrator => vec![x[2], x[3], u[0], u[1]],
            EnvKind::DubinsCar => {
                let (theta, v) = (x[2], x[3]);
                vec![v * theta.cos(), v * theta.sin(), u[0], u[1]]
            }
            EnvKind::LinearDrone => vec![
                x[3],
                x[4],
                x[5],
                -1.1 * x[3] + 1.1 * u[0],
                -1.1 * x[4] + 1.1 * u[1],
                -6.0 * x[5] + 6.0 * u[2],
            ],
            EnvKind::CrazyflieDrone => {
                let cmd = [u[0], u[1], u[2], u[3]];
                let wrench = self.crazyflie_gains().wrench(&self.crazyflie, x, &cmd);
                wrench_derivative(&self.crazyflie, x, &wrench)?.to_vec()
            }
        })
    }

    /// Drift term `f(x) = x_dot(x, 0)`.
    pub fn drift(&self, x: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        self.derivative(x, &vec![0.0; self.kind.control_dim()])
    }

    /// Control matrix `g(x)`, shape `state_dim x control_dim` (row-major).
    pub fn control_matrix(&self, x: &[f64]) -> Result<Vec<Vec<f64>>, DynamicsError> {
        self.check_state(x)?;
        let n = self.kind.state_dim();
        let m = self.kind.control_dim();
        let mut g = vec![vec![0.0; m]; n];
        match self.kind {
            EnvKind::SingleIntegrator => {
                g[0][0] = 1.0;
                g[1][1] = 1.0;
            }
            EnvKind::DoubleIntegrator | EnvKind::DubinsCar => {
                g[2][0] = 1.0;
                g[3][1] = 1.0;
            }
            EnvKind::LinearDrone => {
                g[3][0] = 1.1;
                g[4][1] = 1.1;
                g[5][2] = 6.0;
            }
            EnvKind::CrazyflieDrone => {
                // B maps the wrench into the state derivative; compose with
                // the inner loop's wrench/command Jacobian.
                let p = &self.crazyflie;
                let b_rows = [
                    (5, 0, 1.0 / p.mass),
                    (9, 1, 1.0 / p.inertia_zz),
                    (10, 2, 1.0 / p.inertia_yy),
                    (11, 3, 1.0 / p.inertia_xx),
                ];
                let j = self.crazyflie_gains().wrench_cmd_jacobian(p);
                for &(row, wrench_idx, scale) in &b_rows {
                    for c in 0..4 {
                        g[row][c] = scale * j[wrench_idx][c];
                    }
                }
            }
        }
        Ok(g)
    }

    /// Explicit Euler step with the control clamped to the limits first.
    pub fn step(&self, x: &[f64], u: &[f64], dt: f64) -> Result<Vec<f64>, DynamicsError> {
        assert!(dt > 0.0, "dt must be positive");
        let u = self.limits.clamp(u);
        let dx = self.derivative(x, &u)?;
        Ok(x.iter().zip(&dx).map(|(xv, dv)| xv + dt * dv).collect())
    }

    /// Position: the first `pos_dim` state entries.
    pub fn position<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        &x[..self.kind.pos_dim()]
    }

    /// Velocity `p_dot` as a function of the state. Zero for the single
    /// integrator, whose velocity is the control itself.
    pub fn velocity(&self, x: &[f64]) -> Vec<f64> {
        match self.kind {
            EnvKind::SingleIntegrator => vec![0.0, 0.0],
            EnvKind::DoubleIntegrator => vec![x[2], x[3]],
            EnvKind::DubinsCar => vec![x[3] * x[2].cos(), x[3] * x[2].sin()],
            EnvKind::LinearDrone => vec![x[3], x[4], x[5]],
            EnvKind::CrazyflieDrone => world_velocity(x).to_vec(),
        }
    }

    /// Relative-feature encoding `e(x)`: position followed by velocity
    /// (position only for the single integrator).
    pub fn feature_map(&self, x: &[f64]) -> Vec<f64> {
        match self.kind {
            EnvKind::SingleIntegrator => x.to_vec(),
            _ => {
                let mut e = self.position(x).to_vec();
                e.extend(self.velocity(x));
                e
            }
        }
    }

    /// Jacobian of [`Env::feature_map`], shape `edge_dim x state_dim`.
    pub fn feature_jacobian(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let n = self.kind.state_dim();
        let rho = self.kind.edge_dim();
        let mut j = vec![vec![0.0; n]; rho];
        match self.kind {
            EnvKind::SingleIntegrator
            | EnvKind::DoubleIntegrator
            | EnvKind::LinearDrone => {
                for (i, row) in j.iter_mut().enumerate() {
                    row[i] = 1.0;
                }
            }
            EnvKind::DubinsCar => {
                let (theta, v) = (x[2], x[3]);
                j[0][0] = 1.0;
                j[1][1] = 1.0;
                j[2][2] = -v * theta.sin();
                j[2][3] = theta.cos();
                j[3][2] = v * theta.cos();
                j[3][3] = theta.sin();
            }
            EnvKind::CrazyflieDrone => {
                j[0][0] = 1.0;
                j[1][1] = 1.0;
                j[2][2] = 1.0;
                let vel_jac = world_velocity_jacobian(x);
                for r in 0..3 {
                    j[3 + r].copy_from_slice(&vel_jac[r]);
                }
            }
        }
        j
    }

    /// Nominal goal-reaching controller, clamped to the limits.
    pub fn nominal(&self, x: &[f64], goal: &[f64]) -> Vec<f64> {
        let u = match self.kind {
            EnvKind::SingleIntegrator => vec![goal[0] - x[0], goal[1] - x[1]],
            EnvKind::DoubleIntegrator => {
                let k = self.di_gain;
                (0..2)
                    .map(|a| -k[0] * (x[a] - goal[a]) - k[1] * x[2 + a])
                    .collect()
            }
            EnvKind::DubinsCar => {
                let (dx, dy) = (goal[0] - x[0], goal[1] - x[1]);
                let dist = (dx * dx + dy * dy).sqrt();
                let heading_err = wrap_angle(dy.atan2(dx) - x[2]);
                let v_des = dist.min(self.dubins_speed_max);
                vec![heading_err, v_des - x[3]]
            }
            EnvKind::LinearDrone => {
                let mut u = Vec::with_capacity(3);
                for a in 0..3 {
                    let k = if a < 2 { self.ld_gain_xy } else { self.ld_gain_z };
                    u.push(-k[0] * (x[a] - goal[a]) - k[1] * x[3 + a]);
                }
                u
            }
            EnvKind::CrazyflieDrone => {
                // Outer loop: unit-gain LQR on the velocity-command model
                // p_dot = v_ref, plus yaw regulation through the rate loop.
                vec![goal[0] - x[0], goal[1] - x[1], goal[2] - x[2], -x[8]]
            }
        };
        self.limits.clamp(&u)
    }
}

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut w = a % two_pi;
    if w > std::f64::consts::PI {
        w -= two_pi;
    } else if w <= -std::f64::consts::PI {
        w += two_pi;
    }
    w
}

/// LQR gain for one `(position error, velocity)` axis of `p_ddot = -damping v
/// + gain u` with Q = I, R = 1.
fn lqr_axis_gain(damping: f64, gain: f64) -> Result<[f64; 2], DynamicsError> {
    let (a, b) = if gain == 1.0 && damping == 0.0 {
        // Pure double integrator.
        (
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DVector::from_column_slice(&[0.0, 1.0]),
        )
    } else {
        (
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, -damping]),
            DVector::from_column_slice(&[0.0, gain]),
        )
    };
    let k = lqr_gain(&a, &b, &DMatrix::identity(2, 2), 1.0)?;
    Ok([k[0], k[1]])
}
