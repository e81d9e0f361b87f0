//! Hand-crafted pairwise higher-order CBF:
//!
//! `h0 = ||p_i - p_j||^2 - (2r)^2`, `h = h0_dot + alpha0 * h0`
//!
//! with the single integrator using `h = h0` directly (its distance function
//! already has relative degree one). Rows are linear in the pair's controls,
//! which is what the centralized and decentralized QPs consume.

use crate::dynamics::{Env, EnvKind};

/// Gains of the hand-crafted barrier: `alpha0` composes the higher-order
/// barrier, `alpha` scales the CBF condition `h_dot + alpha h >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HocbfParams {
    pub alpha0: f64,
    pub alpha: f64,
}

impl HocbfParams {
    pub fn new(alpha0: f64, alpha: f64) -> Self {
        assert!(alpha0 > 0.0 && alpha > 0.0);
        Self { alpha0, alpha }
    }

    /// Per-environment `alpha0` defaults (the single integrator uses the
    /// plain distance barrier, so its value is unused).
    pub fn default_alpha0(env: EnvKind) -> f64 {
        match env {
            EnvKind::SingleIntegrator => 1.0,
            EnvKind::DoubleIntegrator => 10.0,
            EnvKind::DubinsCar => 5.0,
            EnvKind::LinearDrone | EnvKind::CrazyflieDrone => 3.0,
        }
    }
}

/// The other body of a pairwise barrier: a controlled agent or a static
/// point (LiDAR hit).
#[derive(Debug, Clone)]
pub enum PairBody<'a> {
    Agent { state: &'a [f64] },
    StaticPoint { position: &'a [f64] },
}

impl PairBody<'_> {
    fn position<'b>(&'b self, env: &Env) -> &'b [f64] {
        match self {
            PairBody::Agent { state } => env.position(state),
            PairBody::StaticPoint { position } => position,
        }
    }

    fn velocity(&self, env: &Env) -> Vec<f64> {
        match self {
            PairBody::Agent { state } => env.velocity(state),
            PairBody::StaticPoint { .. } => vec![0.0; env.kind.pos_dim()],
        }
    }
}

/// `(h0, h)` for a pair.
pub fn hocbf_value(
    env: &Env,
    x_i: &[f64],
    other: &PairBody<'_>,
    alpha0: f64,
    agent_radius: f64,
) -> (f64, f64) {
    let nn = env.kind.pos_dim();
    let pi = env.position(x_i);
    let pj = other.position(env);
    let dp: Vec<f64> = (0..nn).map(|a| pi[a] - pj[a]).collect();
    let h0 = dp.iter().map(|d| d * d).sum::<f64>() - (2.0 * agent_radius).powi(2);
    if env.kind == EnvKind::SingleIntegrator {
        return (h0, h0);
    }
    let vi = env.velocity(x_i);
    let vj = other.velocity(env);
    let h0_dot = 2.0 * dp.iter().zip(vi.iter().zip(&vj)).map(|(d, (a, b))| d * (a - b)).sum::<f64>();
    (h0, h0_dot + alpha0 * h0)
}

/// Gradient of `h` w.r.t. the state of side `i` (sign +1) or `j` (sign -1).
fn hocbf_state_gradient(
    env: &Env,
    x: &[f64],
    dp: &[f64],
    dv: &[f64],
    alpha0: f64,
    sign: f64,
) -> Vec<f64> {
    let n = env.kind.state_dim();
    let nn = env.kind.pos_dim();
    let mut grad = vec![0.0; n];
    if env.kind == EnvKind::SingleIntegrator {
        // h = h0: d h / d p = 2 dp (position is the whole state).
        for a in 0..nn {
            grad[a] = sign * 2.0 * dp[a];
        }
        return grad;
    }
    // h = 2 dp'(v_i - v_j) + alpha0 (||dp||^2 - (2r)^2):
    // d/dx = 2 Jp'(dv) + 2 Jv'(dp) + 2 alpha0 Jp'(dp), with Jp the position
    // selector and Jv the velocity Jacobian of this side's state.
    for a in 0..nn {
        grad[a] = sign * (2.0 * dv[a] + 2.0 * alpha0 * dp[a]);
    }
    let jac = env.feature_jacobian(x);
    for a in 0..nn {
        let vd_row = &jac[nn + a];
        let scale = sign * 2.0 * dp[a];
        for (g, &j) in grad.iter_mut().zip(vd_row) {
            *g += scale * j;
        }
    }
    grad
}

/// One pairwise CBF row, linear in `(u_i, u_j)`:
/// `coef_i'u_i + coef_j'u_j >= rhs_full`, equivalent to `h_dot + alpha h >= 0`.
///
/// `rhs_half` is the shared-responsibility right-hand side used by the
/// decentralized variant: agent i enforces `coef_i'u_i >= rhs_half` and
/// agent j enforces `coef_j'u_j >= rhs_half`, and the two rows sum back to
/// the full condition.
#[derive(Debug, Clone)]
pub struct PairRow {
    pub coef_i: Vec<f64>,
    /// Empty for a static other body.
    pub coef_j: Vec<f64>,
    pub rhs_full: f64,
    pub rhs_half: f64,
    pub h0: f64,
    pub h: f64,
}

pub fn pair_row(
    env: &Env,
    x_i: &[f64],
    other: &PairBody<'_>,
    params: &HocbfParams,
    agent_radius: f64,
) -> PairRow {
    let nn = env.kind.pos_dim();
    let pi = env.position(x_i);
    let pj = other.position(env);
    let dp: Vec<f64> = (0..nn).map(|a| pi[a] - pj[a]).collect();
    let vi = env.velocity(x_i);
    let vj = other.velocity(env);
    let dv: Vec<f64> = vi.iter().zip(&vj).map(|(a, b)| a - b).collect();
    let (h0, h) = hocbf_value(env, x_i, other, params.alpha0, agent_radius);

    let grad_i = hocbf_state_gradient(env, x_i, &dp, &dv, params.alpha0, 1.0);
    let g_i = env.control_matrix(x_i).expect("state checked");
    let f_i = env.drift(x_i).expect("state checked");
    let m = env.kind.control_dim();
    let mut coef_i = vec![0.0; m];
    for (r, gr) in grad_i.iter().zip(&g_i) {
        for (c, gv) in coef_i.iter_mut().zip(gr) {
            *c += r * gv;
        }
    }
    let mut drift_term: f64 = grad_i.iter().zip(&f_i).map(|(a, b)| a * b).sum();

    let coef_j = match other {
        PairBody::Agent { state } => {
            let grad_j = hocbf_state_gradient(env, state, &dp, &dv, params.alpha0, -1.0);
            let g_j = env.control_matrix(state).expect("state checked");
            let f_j = env.drift(state).expect("state checked");
            drift_term += grad_j.iter().zip(&f_j).map(|(a, b)| a * b).sum::<f64>();
            let mut coef = vec![0.0; m];
            for (r, gr) in grad_j.iter().zip(&g_j) {
                for (c, gv) in coef.iter_mut().zip(gr) {
                    *c += r * gv;
                }
            }
            coef
        }
        PairBody::StaticPoint { .. } => Vec::new(),
    };

    let rhs_full = -params.alpha * h - drift_term;
    PairRow { coef_i, coef_j, rhs_full, rhs_half: 0.5 * rhs_full, h0, h }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn h0_hand_value() {
        let env = Env::new(EnvKind::SingleIntegrator).unwrap();
        let other_state = [0.2, 0.0];
        let other = PairBody::Agent { state: &other_state };
        let (h0, h) = hocbf_value(&env, &[0.0, 0.0], &other, 10.0, 0.05);
        assert!((h0 - 0.03).abs() < 1e-15);
        // Single integrator: h == h0.
        assert_eq!(h0, h);
    }

    #[test]
    fn zero_relative_velocity_gives_alpha0_h0() {
        let env = Env::new(EnvKind::DoubleIntegrator).unwrap();
        let xj = [0.3, 0.1, 0.2, -0.1];
        let xi = [0.0, 0.0, 0.2, -0.1];
        let (h0, h) = hocbf_value(&env, &xi, &PairBody::Agent { state: &xj }, 10.0, 0.05);
        assert!((h - 10.0 * h0).abs() < 1e-12);
    }

    #[test]
    fn coincident_positions_maximal_violation() {
        let env = Env::new(EnvKind::DoubleIntegrator).unwrap();
        let xj = [0.0, 0.0, 0.0, 0.0];
        let (h0, _) = hocbf_value(&env, &[0.0, 0.0, 1.0, 0.0], &PairBody::Agent { state: &xj }, 10.0, 0.05);
        assert!((h0 + 0.01).abs() < 1e-15);
    }

    #[test]
    fn shared_rows_recover_centralized_condition() {
        // rhs_half + rhs_half == rhs_full bitwise, all envs, random states.
        for kind in EnvKind::ALL {
            let env = Env::new(kind).unwrap();
            let n = kind.state_dim();
            let mut v = 0.123_f64;
            let mut next = move || {
                v = (v * 997.0 + 0.317) % 1.0;
                0.4 * (v - 0.5)
            };
            for _ in 0..50 {
                let xi: Vec<f64> = (0..n).map(|_| next()).collect();
                let mut xj: Vec<f64> = (0..n).map(|_| next()).collect();
                // Keep positions separated.
                xj[0] += 0.3;
                let params = HocbfParams::new(HocbfParams::default_alpha0(kind), 1.0);
                let row = pair_row(&env, &xi, &PairBody::Agent { state: &xj }, &params, 0.05);
                assert_eq!(row.rhs_half + row.rhs_half, row.rhs_full);
            }
        }
    }

    #[test]
    fn row_matches_finite_difference_hdot() {
        // coef_i'u_i + coef_j'u_j - (rhs_full + alpha h) should equal hdot.
        let env = Env::new(EnvKind::DoubleIntegrator).unwrap();
        let xi = vec![0.0, 0.0, 0.3, -0.2];
        let xj = vec![0.25, 0.1, -0.1, 0.4];
        let params = HocbfParams::new(10.0, 1.0);
        let row = pair_row(&env, &xi, &PairBody::Agent { state: &xj }, &params, 0.05);
        let ui = [0.3, -0.5];
        let uj = [-0.2, 0.7];
        let lhs: f64 = row.coef_i.iter().zip(&ui).map(|(a, b)| a * b).sum::<f64>()
            + row.coef_j.iter().zip(&uj).map(|(a, b)| a * b).sum::<f64>();
        // hdot by finite differences along the flow.
        let dt = 1e-7;
        let xi2 = env.step(&xi, &ui, dt).unwrap();
        let xj2 = env.step(&xj, &uj, dt).unwrap();
        let (_, h1) = hocbf_value(&env, &xi, &PairBody::Agent { state: &xj }, 10.0, 0.05);
        let (_, h2) = hocbf_value(&env, &xi2, &PairBody::Agent { state: &xj2 }, 10.0, 0.05);
        let hdot_fd = (h2 - h1) / dt;
        let hdot_row = lhs - (row.rhs_full + params.alpha * row.h);
        assert!(
            (hdot_fd - hdot_row).abs() < 1e-5,
            "fd {hdot_fd} vs row {hdot_row}"
        );
    }
}
