//! QP-based controllers: the centralized training target built from the
//! learned certificate, and the hand-crafted centralized / decentralized
//! CBF-QP baselines.

use crate::dynamics::Env;
use crate::gnn::{certificate_state_gradients, GnnCore};
use crate::numerics::NumericsError;
use crate::world::{LidarHit, SceneGraph, World};

use super::hocbf::{pair_row, HocbfParams, PairBody};
use super::solver::{solve_qp, solve_relaxed, QpError, QpProblem, QpRow, QpStatus};

#[derive(Debug, thiserror::Error)]
pub enum ControllerError {
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Dynamics(#[from] crate::dynamics::DynamicsError),
}

/// Joint controls plus the relaxation flag for infeasible instants.
#[derive(Debug, Clone)]
pub struct QpControls {
    pub controls: Vec<Vec<f64>>,
    pub relaxed: bool,
    pub max_slack: f64,
}

fn tile_box(env: &Env, n: usize) -> (Vec<f64>, Vec<f64>) {
    let m = env.kind.control_dim();
    let mut lower = Vec::with_capacity(n * m);
    let mut upper = Vec::with_capacity(n * m);
    for _ in 0..n {
        lower.extend_from_slice(&env.limits.lo);
        upper.extend_from_slice(&env.limits.hi);
    }
    (lower, upper)
}

fn solve_joint(
    env: &Env,
    n: usize,
    target: &[f64],
    rows: Vec<QpRow>,
) -> Result<QpControls, ControllerError> {
    let m = env.kind.control_dim();
    let (lower, upper) = tile_box(env, n);
    let problem = QpProblem::tracking(target, rows, lower, upper);
    let sol = solve_qp(&problem)?;
    let (point, relaxed, max_slack) = match sol.status {
        QpStatus::Optimal => (sol.point, false, 0.0),
        _ => {
            let relaxed = solve_relaxed(&problem)?;
            (relaxed.point, true, relaxed.max_slack)
        }
    };
    let controls = (0..n).map(|i| point[i * m..(i + 1) * m].to_vec()).collect();
    Ok(QpControls { controls, relaxed, max_slack })
}

/// Centralized QP target: minimally deviate from the nominal controls while
/// satisfying, for every agent, the certificate descent condition
/// `sum_j dh_i/dx_j (f(x_j) + g(x_j) u_j) >= -alpha h_i` over its
/// neighborhood. One coupled QP over all agents' controls.
pub fn pi_qp_target(
    env: &Env,
    certificate: &GnnCore,
    graph: &SceneGraph,
    alpha: f64,
    u_nom: &[Vec<f64>],
) -> Result<QpControls, ControllerError> {
    let n = graph.n_agents;
    let m = env.kind.control_dim();
    let grads = certificate_state_gradients(env, certificate, graph)?;

    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut coeffs = vec![0.0; n * m];
        let mut drift_term = 0.0;
        let mut add_block = |agent: usize, grad: &[f64]| -> Result<(), ControllerError> {
            let x = &graph.nodes[agent].state;
            let g = env.control_matrix(x)?;
            let f = env.drift(x)?;
            for (r, (grow, fv)) in grad.iter().zip(g.iter().zip(&f)) {
                for (c, gv) in grow.iter().enumerate() {
                    coeffs[agent * m + c] += r * gv;
                }
                drift_term += r * fv;
            }
            Ok(())
        };
        add_block(i, &grads.wrt_self[i])?;
        for (j, grad) in &grads.wrt_senders[i] {
            add_block(*j, grad)?;
        }
        rows.push(QpRow { coeffs, rhs: -alpha * grads.values[i] - drift_term });
    }

    let target: Vec<f64> = u_nom.iter().flatten().copied().collect();
    solve_joint(env, n, &target, rows)
}

/// Centralized hand-crafted CBF-QP: one row per agent pair within the
/// sensing radius plus one row per LiDAR return (a static zero-velocity
/// body), all in a single QP over the joint controls.
pub fn centralized_cbfqp(
    env: &Env,
    world: &World,
    scan: &[Vec<LidarHit>],
    params: &HocbfParams,
) -> Result<QpControls, ControllerError> {
    let n = world.n_agents();
    let m = env.kind.control_dim();
    let mut rows = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let d = crate::world::distance(world.position(i), world.position(j));
            if d >= world.sensing_radius {
                continue;
            }
            let pr = pair_row(
                env,
                &world.states[i],
                &PairBody::Agent { state: &world.states[j] },
                params,
                world.agent_radius,
            );
            let mut coeffs = vec![0.0; n * m];
            coeffs[i * m..(i + 1) * m].copy_from_slice(&pr.coef_i);
            coeffs[j * m..(j + 1) * m].copy_from_slice(&pr.coef_j);
            rows.push(QpRow { coeffs, rhs: pr.rhs_full });
        }
        for hit in &scan[i] {
            let pr = pair_row(
                env,
                &world.states[i],
                &PairBody::StaticPoint { position: &hit.point },
                params,
                world.agent_radius,
            );
            let mut coeffs = vec![0.0; n * m];
            coeffs[i * m..(i + 1) * m].copy_from_slice(&pr.coef_i);
            rows.push(QpRow { coeffs, rhs: pr.rhs_full });
        }
    }
    let target: Vec<f64> = (0..n)
        .flat_map(|i| env.nominal(&world.states[i], &world.goals[i]))
        .collect();
    solve_joint(env, n, &target, rows)
}

/// Decentralized hand-crafted CBF-QP for one agent: neighbor rows carry the
/// halved shared right-hand side, obstacle rows are un-halved (obstacles do
/// not cooperate).
pub fn decentralized_cbfqp(
    env: &Env,
    world: &World,
    scan: &[Vec<LidarHit>],
    agent: usize,
    params: &HocbfParams,
) -> Result<QpControls, ControllerError> {
    let n = world.n_agents();
    let mut rows = Vec::new();
    for j in 0..n {
        if j == agent {
            continue;
        }
        let d = crate::world::distance(world.position(agent), world.position(j));
        if d >= world.sensing_radius {
            continue;
        }
        let pr = pair_row(
            env,
            &world.states[agent],
            &PairBody::Agent { state: &world.states[j] },
            params,
            world.agent_radius,
        );
        rows.push(QpRow { coeffs: pr.coef_i, rhs: pr.rhs_half });
    }
    for hit in &scan[agent] {
        let pr = pair_row(
            env,
            &world.states[agent],
            &PairBody::StaticPoint { position: &hit.point },
            params,
            world.agent_radius,
        );
        rows.push(QpRow { coeffs: pr.coef_i, rhs: pr.rhs_full });
    }
    let target = env.nominal(&world.states[agent], &world.goals[agent]);
    let problem = QpProblem::tracking(&target, rows, env.limits.lo.clone(), env.limits.hi.clone());
    let sol = solve_qp(&problem)?;
    let (point, relaxed, max_slack) = match sol.status {
        QpStatus::Optimal => (sol.point, false, 0.0),
        _ => {
            let relaxed = solve_relaxed(&problem)?;
            (relaxed.point, true, relaxed.max_slack)
        }
    };
    Ok(QpControls { controls: vec![point], relaxed, max_slack })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::EnvKind;
    use crate::gnn::init_params;
    use crate::numerics::{RngState, Tensor};
    use crate::world::{World, DEFAULT_AGENT_RADIUS, DEFAULT_RAYS_2D, DEFAULT_SENSING_RADIUS};

    fn si_world(states: Vec<Vec<f64>>, goals: Vec<Vec<f64>>) -> World {
        World {
            env: EnvKind::SingleIntegrator,
            states,
            goals,
            obstacles: vec![],
            area_width: 4.0,
            sensing_radius: DEFAULT_SENSING_RADIUS,
            agent_radius: DEFAULT_AGENT_RADIUS,
            n_rays: DEFAULT_RAYS_2D,
            time_index: 0,
        }
    }

    /// Certificate that outputs a constant positive value: zero weights
    /// everywhere with a positive head bias.
    fn constant_positive_certificate(env: EnvKind, value: f64) -> GnnCore {
        let mut core = init_params(RngState::new(0), env).certificate;
        for (_, mlp) in core.mlps_mut() {
            for layer in &mut mlp.layers {
                let (r, c) = layer.weight.shape();
                layer.weight = Tensor::zeros(r, c);
                let (rb, cb) = layer.bias.shape();
                layer.bias = Tensor::zeros(rb, cb);
            }
        }
        let head_last = core.head.layers.last_mut().unwrap();
        head_last.bias = Tensor::row(vec![value]);
        core
    }

    #[test]
    fn inactive_rows_give_clamped_nominal() {
        let env = Env::new(EnvKind::SingleIntegrator).unwrap();
        // Constant h = 5: every row is 0 >= -5, slack everywhere.
        let cert = constant_positive_certificate(EnvKind::SingleIntegrator, 5.0);
        let world = si_world(
            vec![vec![0.0, 0.0], vec![0.3, 0.0]],
            vec![vec![3.0, 0.0], vec![0.3, 1.0]],
        );
        let graph = world.graph(&env);
        let u_nom: Vec<Vec<f64>> =
            (0..2).map(|i| env.nominal(&world.states[i], &world.goals[i])).collect();
        let out = pi_qp_target(&env, &cert, &graph, 1.0, &u_nom).unwrap();
        assert!(!out.relaxed);
        for (u, nom) in out.controls.iter().zip(&u_nom) {
            for (a, b) in u.iter().zip(nom) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn single_agent_single_row_matches_closed_form() {
        // With one scalar constraint a'u >= b and no binding box, the
        // minimizer of ||u - nom||^2 is nom + a max(0, b - a'nom)/||a||^2.
        // Wide box so the single row is the only active constraint.
        let mut env = Env::new(EnvKind::SingleIntegrator).unwrap();
        env.limits = crate::dynamics::ControlLimits::symmetric(2, 10.0);
        let params = init_params(RngState::new(11), EnvKind::SingleIntegrator);
        let world = si_world(vec![vec![0.2, 0.1]], vec![vec![0.5, 0.4]]);
        let graph = world.graph(&env);
        let grads = certificate_state_gradients(&env, &params.certificate, &graph).unwrap();
        let u_nom = vec![env.nominal(&world.states[0], &world.goals[0])];
        let out = pi_qp_target(&env, &params.certificate, &graph, 1.0, &u_nom).unwrap();

        // For the single integrator, g = I: the row coefficients are exactly
        // dh/dx_i and the rhs is -alpha h.
        let a = grads.wrt_self[0].clone();
        let b = -grads.values[0];
        let a_dot_nom: f64 = a.iter().zip(&u_nom[0]).map(|(x, y)| x * y).sum();
        let norm2: f64 = a.iter().map(|x| x * x).sum();
        let scale = ((b - a_dot_nom) / norm2).max(0.0);
        for k in 0..2 {
            let expect = u_nom[0][k] + scale * a[k];
            assert!(
                expect.abs() < 10.0,
                "test setup must keep the closed form inside the box, got {expect}"
            );
            assert!(
                (out.controls[0][k] - expect).abs() < 1e-8,
                "coord {k}: {} vs {expect}",
                out.controls[0][k]
            );
        }
    }

    #[test]
    fn far_apart_agents_get_nominal_from_baseline() {
        let env = Env::new(EnvKind::SingleIntegrator).unwrap();
        let world = si_world(
            vec![vec![0.0, 0.0], vec![3.0, 3.0]],
            vec![vec![0.5, 0.0], vec![3.0, 3.5]],
        );
        let scan = world.lidar_scan();
        let params = HocbfParams::new(1.0, 1.0);
        let out = centralized_cbfqp(&env, &world, &scan, &params).unwrap();
        assert!(!out.relaxed);
        for i in 0..2 {
            let nom = env.nominal(&world.states[i], &world.goals[i]);
            for (a, b) in out.controls[i].iter().zip(&nom) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn head_on_pair_deflects_symmetrically() {
        let env = Env::new(EnvKind::SingleIntegrator).unwrap();
        // Mirror-symmetric head-on setup about x = 0.2.
        let world = si_world(
            vec![vec![0.0, 0.0], vec![0.4, 0.0]],
            vec![vec![0.4, 0.0], vec![0.0, 0.0]],
        );
        let scan = world.lidar_scan();
        let params = HocbfParams::new(1.0, 1.0);
        let out = centralized_cbfqp(&env, &world, &scan, &params).unwrap();
        assert!(!out.relaxed);
        let u0 = &out.controls[0];
        let u1 = &out.controls[1];
        assert!((u0[0] + u1[0]).abs() < 1e-8, "x components mirror: {u0:?} {u1:?}");
        assert!((u0[1] - u1[1]).abs() < 1e-8, "y components agree: {u0:?} {u1:?}");
        // The pair constraint holds: relative motion does not shrink the gap
        // faster than alpha h allows.
        let dp = [
            world.states[0][0] - world.states[1][0],
            world.states[0][1] - world.states[1][1],
        ];
        let h = dp[0] * dp[0] + dp[1] * dp[1] - 0.01;
        let hdot = 2.0 * (dp[0] * (u0[0] - u1[0]) + dp[1] * (u0[1] - u1[1]));
        assert!(hdot + h >= -1e-9);
    }

    #[test]
    fn isolated_agent_decentralized_is_nominal() {
        let env = Env::new(EnvKind::SingleIntegrator).unwrap();
        let world = si_world(
            vec![vec![0.0, 0.0], vec![3.0, 3.0]],
            vec![vec![0.5, 0.5], vec![2.0, 3.0]],
        );
        let scan = world.lidar_scan();
        let params = HocbfParams::new(1.0, 0.1);
        let out = decentralized_cbfqp(&env, &world, &scan, 0, &params).unwrap();
        assert!(!out.relaxed);
        let nom = env.nominal(&world.states[0], &world.goals[0]);
        for (a, b) in out.controls[0].iter().zip(&nom) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn symmetric_pair_stays_safe_decentralized_over_episode() {
        // Two agents swapping positions under DecCBF stay collision-free for
        // a full 4096-step episode.
        let env = Env::new(EnvKind::SingleIntegrator).unwrap();
        let mut world = si_world(
            vec![vec![1.0, 1.0], vec![2.0, 1.0]],
            vec![vec![2.0, 1.0], vec![1.0, 1.0]],
        );
        let params = HocbfParams::new(1.0, 0.1);
        for _ in 0..4096 {
            let scan = world.lidar_scan();
            let mut controls = Vec::new();
            for i in 0..2 {
                let out = decentralized_cbfqp(&env, &world, &scan, i, &params).unwrap();
                controls.push(out.controls[0].clone());
            }
            for i in 0..2 {
                world.states[i] = env.step(&world.states[i], &controls[i], 0.03).unwrap();
            }
            let d = crate::world::distance(world.position(0), world.position(1));
            assert!(d > 2.0 * world.agent_radius, "collision at distance {d}");
        }
    }

    #[test]
    fn triangle_instance_matches_grid_search() {
        let env = Env::new(EnvKind::SingleIntegrator).unwrap();
        // Tight triangle, goals through the middle.
        let world = si_world(
            vec![vec![0.0, 0.0], vec![0.3, 0.0], vec![0.15, 0.26]],
            vec![vec![0.3, 0.26], vec![0.0, 0.26], vec![0.15, -0.1]],
        );
        let scan = world.lidar_scan();
        let params = HocbfParams::new(1.0, 1.0);
        let out = centralized_cbfqp(&env, &world, &scan, &params).unwrap();
        assert!(!out.relaxed);

        // Independent brute-force oracle on a 31x31 grid per agent with
        // objective pruning.
        let nominal: Vec<Vec<f64>> =
            (0..3).map(|i| env.nominal(&world.states[i], &world.goals[i])).collect();
        let rows: Vec<(usize, usize, Vec<f64>, Vec<f64>, f64)> = (0..3)
            .flat_map(|i| ((i + 1)..3).map(move |j| (i, j)))
            .map(|(i, j)| {
                let pr = pair_row(
                    &env,
                    &world.states[i],
                    &PairBody::Agent { state: &world.states[j] },
                    &params,
                    world.agent_radius,
                );
                (i, j, pr.coef_i, pr.coef_j, pr.rhs_full)
            })
            .collect();
        let grid: Vec<f64> = (0..31).map(|k| -1.0 + 2.0 * k as f64 / 30.0).collect();
        let mut per_agent: Vec<Vec<([f64; 2], f64)>> = Vec::new();
        for nom in &nominal {
            let mut cands: Vec<([f64; 2], f64)> = grid
                .iter()
                .flat_map(|&a| grid.iter().map(move |&b| [a, b]))
                .map(|u| {
                    let c = (u[0] - nom[0]).powi(2) + (u[1] - nom[1]).powi(2);
                    (u, c)
                })
                .collect();
            cands.sort_by(|x, y| x.1.partial_cmp(&y.1).unwrap());
            per_agent.push(cands);
        }
        let feasible = |u: &[[f64; 2]; 3]| {
            rows.iter().all(|(i, j, ci, cj, rhs)| {
                let lhs: f64 = ci.iter().zip(&u[*i]).map(|(a, b)| a * b).sum::<f64>()
                    + cj.iter().zip(&u[*j]).map(|(a, b)| a * b).sum::<f64>();
                lhs >= *rhs - 1e-9
            })
        };
        let mut best = f64::INFINITY;
        for &(u0, c0) in &per_agent[0] {
            if c0 >= best {
                break;
            }
            for &(u1, c1) in &per_agent[1] {
                if c0 + c1 >= best {
                    break;
                }
                for &(u2, c2) in &per_agent[2] {
                    let cost = c0 + c1 + c2;
                    if cost >= best {
                        break;
                    }
                    if feasible(&[u0, u1, u2]) {
                        best = cost;
                        break;
                    }
                }
            }
        }
        let qp_cost: f64 = out
            .controls
            .iter()
            .zip(&nominal)
            .map(|(u, nom)| (u[0] - nom[0]).powi(2) + (u[1] - nom[1]).powi(2))
            .sum();
        // The QP is at least as good as the best grid point, and the grid
        // comes within its discretization error of the QP.
        assert!(qp_cost <= best + 1e-9, "qp {qp_cost} vs grid {best}");
        assert!(best - qp_cost < 0.05, "qp {qp_cost} vs grid {best}");
    }
}
