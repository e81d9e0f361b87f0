//! The learning loop: on-policy rollouts, finite-horizon control-invariance
//! labeling, the hinge losses with the finite-difference certificate
//! derivative, and joint optimization of certificate and policy.

mod loss;
mod rollout;
mod train;

pub use loss::{hdot_estimates, loss_and_gradients, LossGrads, LossTerms, LossWeights, TrainerError};
pub use rollout::{
    collect_onpolicy, label_invariance, label_one, sample_batch, step_world_with_policy, Label,
    LabeledDataset, Transition,
};
pub use train::{
    collect_round, label_counts, train, train_step, ControlLossTarget, LossRecord, Optimizers,
    TrainConfig, TrainResult,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{Env, EnvKind};
    use crate::gnn::{init_params, GnnParams};
    use crate::numerics::{RngState, Tensor};
    use crate::world::{Obstacle, ScenarioParams, World};

    fn di_env() -> Env {
        Env::new(EnvKind::DoubleIntegrator).unwrap()
    }

    fn small_world(states: Vec<Vec<f64>>, goals: Vec<Vec<f64>>) -> World {
        World {
            env: EnvKind::DoubleIntegrator,
            states,
            goals,
            obstacles: vec![],
            area_width: 4.0,
            sensing_radius: 0.5,
            agent_radius: 0.05,
            n_rays: 32,
            time_index: 0,
        }
    }

    fn transition_from(env: &Env, params: &GnnParams, world: World) -> Transition {
        let (controls, next) = step_world_with_policy(env, params, &world, 0.03).unwrap();
        Transition {
            world,
            controls,
            next_world: next,
            dt: 0.03,
            scenario: 0,
            step_index: 0,
            control_targets: None,
        }
    }

    #[test]
    fn collect_is_deterministic_and_counts_match() {
        let env = di_env();
        let params = init_params(RngState::new(0), env.kind);
        let scen = ScenarioParams::new(env.kind, 4, 3.0, 2);
        let a = collect_onpolicy(&env, &params, &scen, 3, 5, 0.03, RngState::new(7)).unwrap();
        let b = collect_onpolicy(&env, &params, &scen, 3, 5, 0.03, RngState::new(7)).unwrap();
        assert_eq!(a.len(), 15);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.world.states, y.world.states);
            assert_eq!(x.controls, y.controls);
        }
    }

    #[test]
    fn fresh_policy_rollout_equals_nominal_rollout() {
        let env = di_env();
        let params = init_params(RngState::new(1), env.kind);
        let world = small_world(
            vec![vec![0.5, 0.5, 0.0, 0.0], vec![2.0, 2.0, 0.0, 0.0]],
            vec![vec![1.5, 0.5], vec![2.0, 3.0]],
        );
        let mut w_policy = world.clone();
        let mut w_nominal = world;
        for _ in 0..20 {
            let (_, next) = step_world_with_policy(&env, &params, &w_policy, 0.03).unwrap();
            w_policy = next;
            let mut next = w_nominal.clone();
            for (i, x) in next.states.iter_mut().enumerate() {
                let u = env.nominal(x, &w_nominal.goals[i]);
                *x = env.step(x, &u, 0.03).unwrap();
            }
            next.time_index += 1;
            w_nominal = next;
        }
        assert_eq!(w_policy.states, w_nominal.states);
    }

    #[test]
    fn overlapping_agents_label_unsafe() {
        let env = di_env();
        let params = init_params(RngState::new(2), env.kind);
        let world = small_world(
            vec![vec![1.0, 1.0, 0.0, 0.0], vec![1.05, 1.0, 0.0, 0.0]],
            vec![vec![2.0, 1.0], vec![0.0, 1.0]],
        );
        let t = transition_from(&env, &params, world);
        let labels = label_one(&env, &params, &t, 8).unwrap();
        assert_eq!(labels, vec![Label::Unsafe, Label::Unsafe]);
    }

    #[test]
    fn lone_stationary_agent_is_control_invariant() {
        let env = di_env();
        let params = init_params(RngState::new(3), env.kind);
        // At its goal with zero velocity: the nominal (hence fresh policy)
        // control is zero for any horizon.
        let world = small_world(vec![vec![1.0, 1.0, 0.0, 0.0]], vec![vec![1.0, 1.0]]);
        let t = transition_from(&env, &params, world);
        for horizon in [1, 8, 64] {
            let labels = label_one(&env, &params, &t, horizon).unwrap();
            assert_eq!(labels, vec![Label::ControlInvariant]);
        }
    }

    #[test]
    fn inevitable_collision_is_unlabeled() {
        // Double integrator heading at a wall closer than v^2 / (2 a_max):
        // v = 1, a_max = 1 gives stopping distance 0.5; the wall face sits
        // 0.3 ahead. Safe now, doomed within a long horizon: unlabeled.
        let env = di_env();
        let params = init_params(RngState::new(4), env.kind);
        let mut world = small_world(
            vec![vec![1.0, 1.0, 1.0, 0.0]],
            // Goal beyond the wall keeps the nominal pushing forward.
            vec![vec![2.5, 1.0]],
        );
        world.obstacles = vec![Obstacle::Rect { center: [1.5, 1.0], sides: [0.4, 0.4] }];
        let t = transition_from(&env, &params, world);
        let labels = label_one(&env, &params, &t, 32).unwrap();
        assert_eq!(labels, vec![Label::Unlabeled]);
        // Short horizon cannot see the collision yet.
        let labels = label_one(&env, &params, &t, 1).unwrap();
        assert_eq!(labels, vec![Label::ControlInvariant]);
    }

    #[test]
    fn labeling_monotone_and_disjoint() {
        let env = di_env();
        let params = init_params(RngState::new(5), env.kind);
        let scen = ScenarioParams::new(env.kind, 4, 2.0, 2);
        let buffer = collect_onpolicy(&env, &params, &scen, 4, 16, 0.03, RngState::new(9)).unwrap();
        let short = label_invariance(&env, &params, &buffer, 8).unwrap();
        let long = label_invariance(&env, &params, &buffer, 64).unwrap();
        for (ls, ll) in short.labels.iter().zip(&long.labels) {
            for (a, b) in ls.iter().zip(ll) {
                // D_C(64) subset of D_C(8).
                if *b == Label::ControlInvariant {
                    assert_eq!(*a, Label::ControlInvariant);
                }
                // Unsafe does not depend on the horizon.
                assert_eq!(*a == Label::Unsafe, *b == Label::Unsafe);
            }
        }
    }

    #[test]
    fn shared_trajectory_labels_match_independent_rolls() {
        let env = di_env();
        let params = init_params(RngState::new(6), env.kind);
        let scen = ScenarioParams::new(env.kind, 3, 2.0, 1);
        let buffer = collect_onpolicy(&env, &params, &scen, 2, 10, 0.03, RngState::new(3)).unwrap();
        let fast = label_invariance(&env, &params, &buffer, 6).unwrap();
        for (t, labels) in buffer.iter().zip(&fast.labels) {
            let slow = label_one(&env, &params, t, 6).unwrap();
            assert_eq!(labels, &slow);
        }
    }

    #[test]
    fn hdot_zero_on_frozen_world() {
        // Single integrator at its goal: nominal is zero, fresh policy is
        // zero, the world does not move, h is unchanged.
        let env = Env::new(EnvKind::SingleIntegrator).unwrap();
        let params = init_params(RngState::new(7), env.kind);
        let world = World {
            env: EnvKind::SingleIntegrator,
            states: vec![vec![1.0, 1.0]],
            goals: vec![vec![1.0, 1.0]],
            obstacles: vec![],
            area_width: 4.0,
            sensing_radius: 0.5,
            agent_radius: 0.05,
            n_rays: 32,
            time_index: 0,
        };
        let (controls, next) = step_world_with_policy(&env, &params, &world, 0.03).unwrap();
        let t = Transition {
            world,
            controls,
            next_world: next,
            dt: 0.03,
            scenario: 0,
            step_index: 0,
            control_targets: None,
        };
        let hdot = hdot_estimates(&env, &params, &t).unwrap();
        assert_eq!(hdot, vec![0.0]);
    }

    #[test]
    fn hdot_matches_chain_rule_as_dt_shrinks() {
        // Against the analytic chain rule dh/dx . x_dot from the certificate
        // state gradients. The error is O(dt) except when a relu boundary
        // falls inside a probe interval, so bound every probe by a generous
        // linear envelope and ask for the shrinking trend in the majority.
        let env = di_env();
        let params = init_params(RngState::new(8), env.kind);
        let mut mean_errors = [0.0_f64; 3];
        let n_worlds = 8;
        for w in 0..n_worlds {
            let off = 0.07 * w as f64;
            let world = small_world(
                vec![
                    vec![1.0 + off, 1.0, 0.3, -0.2],
                    vec![1.3, 1.0 + off, -0.2, 0.1],
                ],
                vec![vec![2.0, 1.5], vec![0.2, 0.8]],
            );
            let graph = world.graph(&env);
            let grads =
                crate::gnn::certificate_state_gradients(&env, &params.certificate, &graph)
                    .unwrap();
            let batch = crate::gnn::edge_batch(&graph);
            let u_nom: Vec<Vec<f64>> = (0..2)
                .map(|i| env.nominal(&world.states[i], &world.goals[i]))
                .collect();
            let controls = crate::gnn::policy_controls(&env, &params.policy, &batch, &u_nom);
            let mut analytic = 0.0;
            let xd0 = env.derivative(&world.states[0], &controls[0]).unwrap();
            analytic += grads.wrt_self[0].iter().zip(&xd0).map(|(a, b)| a * b).sum::<f64>();
            for (j, g) in &grads.wrt_senders[0] {
                let xdj = env.derivative(&world.states[*j], &controls[*j]).unwrap();
                analytic += g.iter().zip(&xdj).map(|(a, b)| a * b).sum::<f64>();
            }
            for (e, dt) in [0.03, 0.003, 0.0003].into_iter().enumerate() {
                let (c, next) = step_world_with_policy(&env, &params, &world, dt).unwrap();
                let t = Transition {
                    world: world.clone(),
                    controls: c,
                    next_world: next,
                    dt,
                    scenario: 0,
                    step_index: 0,
                    control_targets: None,
                };
                let hdot = hdot_estimates(&env, &params, &t).unwrap();
                let err = (hdot[0] - analytic).abs();
                assert!(err < 0.1 * dt + 1e-12, "dt {dt}: error {err} beyond O(dt) envelope");
                mean_errors[e] += err / n_worlds as f64;
            }
        }
        assert!(
            mean_errors[1] < 0.7 * mean_errors[0] && mean_errors[2] < 0.2 * mean_errors[1],
            "mean error should shrink with dt: {mean_errors:?}"
        );
    }

    #[test]
    fn hinge_arithmetic_matches_hand_values() {
        // A synthetic one-agent world probes the three hinge terms: the
        // safe hinge contributes exactly [gamma - h]^+ per invariant sample.
        let env = di_env();
        let mut params = init_params(RngState::new(9), env.kind);
        // Certificate forced to h = 0 everywhere: zero all tensors.
        for (_, mlp) in params.certificate.mlps_mut() {
            for layer in &mut mlp.layers {
                let (r, c) = layer.weight.shape();
                layer.weight = Tensor::zeros(r, c);
                let (rb, cb) = layer.bias.shape();
                layer.bias = Tensor::zeros(rb, cb);
            }
        }
        let world = small_world(vec![vec![1.0, 1.0, 0.0, 0.0]], vec![vec![1.0, 1.0]]);
        let mut t = transition_from(&env, &params, world);
        t.control_targets = Some(vec![vec![0.0, 0.0]]);
        let weights = LossWeights { alpha: 1.0, gamma: 0.02, eta_deriv: 0.2, eta_ctrl: 1e-4 };

        // h = 0, hdot = 0: derivative hinge = eta_deriv * gamma, safe hinge
        // = gamma, control = 0.
        let grads = loss_and_gradients(
            &env,
            &params,
            &[(&t, &[Label::ControlInvariant])],
            &weights,
        )
        .unwrap();
        assert!((grads.terms.derivative - 0.2 * 0.02).abs() < 1e-15);
        assert!((grads.terms.safe - 0.02).abs() < 1e-15);
        assert_eq!(grads.terms.unsafe_, 0.0);
        assert_eq!(grads.terms.control, 0.0);

        // Unsafe label: [gamma + h]^+ = gamma.
        let grads =
            loss_and_gradients(&env, &params, &[(&t, &[Label::Unsafe])], &weights).unwrap();
        assert!((grads.terms.unsafe_ - 0.02).abs() < 1e-15);
        assert_eq!(grads.terms.safe, 0.0);
    }

    #[test]
    fn unit_deviation_control_contribution() {
        let env = di_env();
        let params = init_params(RngState::new(10), env.kind);
        let world = small_world(vec![vec![1.0, 1.0, 0.0, 0.0]], vec![vec![1.0, 1.0]]);
        let mut t = transition_from(&env, &params, world);
        // Fresh policy output is (0, 0); target (1, 0) gives a unit norm.
        t.control_targets = Some(vec![vec![1.0, 0.0]]);
        let weights = LossWeights { alpha: 1.0, gamma: 0.02, eta_deriv: 0.2, eta_ctrl: 1e-4 };
        let grads = loss_and_gradients(&env, &params, &[(&t, &[Label::Unlabeled])], &weights)
            .unwrap();
        assert!((grads.terms.control - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn zero_loss_certificate_construction() {
        // Constant h = 1 >= gamma with hdot = 0, policy equal to its target:
        // the total loss is exactly zero.
        let env = di_env();
        let mut params = init_params(RngState::new(11), env.kind);
        for (_, mlp) in params.certificate.mlps_mut() {
            for layer in &mut mlp.layers {
                let (r, c) = layer.weight.shape();
                layer.weight = Tensor::zeros(r, c);
                let (rb, cb) = layer.bias.shape();
                layer.bias = Tensor::zeros(rb, cb);
            }
        }
        let head_bias = &mut params.certificate.head.layers.last_mut().unwrap().bias;
        *head_bias = Tensor::row(vec![1.0]);

        let world = small_world(vec![vec![1.0, 1.0, 0.0, 0.0]], vec![vec![1.0, 1.0]]);
        let mut t = transition_from(&env, &params, world);
        t.control_targets = Some(vec![vec![0.0, 0.0]]);
        let weights = LossWeights { alpha: 1.0, gamma: 0.02, eta_deriv: 0.2, eta_ctrl: 1e-4 };
        let grads = loss_and_gradients(
            &env,
            &params,
            &[(&t, &[Label::ControlInvariant])],
            &weights,
        )
        .unwrap();
        assert_eq!(grads.terms.total(), 0.0);
    }

    #[test]
    fn derivative_gradients_flow_only_into_neighborhood_controls() {
        // Two far-apart clusters; the derivative hinge of cluster-one agents
        // must not produce gradients through cluster-two controls. Proxy
        // check: zeroing cluster two's rows in the policy-gradient path by
        // comparing losses after perturbing cluster-two states.
        let env = di_env();
        let params = init_params(RngState::new(12), env.kind);
        let world = small_world(
            vec![
                vec![0.0, 0.0, 0.1, 0.0],
                vec![0.3, 0.0, -0.1, 0.0],
                vec![3.0, 3.0, 0.1, 0.0],
                vec![3.3, 3.0, -0.1, 0.0],
            ],
            vec![vec![0.5, 0.0], vec![-0.2, 0.0], vec![3.5, 3.0], vec![2.8, 3.0]],
        );
        let mut t = transition_from(&env, &params, world);
        let nom: Vec<Vec<f64>> = (0..4)
            .map(|i| env.nominal(&t.world.states[i], &t.world.goals[i]))
            .collect();
        t.control_targets = Some(nom);
        let weights = LossWeights { alpha: 1.0, gamma: 0.02, eta_deriv: 0.2, eta_ctrl: 0.0 };
        let labels = vec![Label::Unlabeled; 4];
        let base = loss_and_gradients(&env, &params, &[(&t, &labels)], &weights).unwrap();

        // Moving cluster two (outside R of cluster one) changes its own
        // hinge terms but the per-parameter gradient contribution from
        // cluster one is unchanged; verify via the derivative-term split:
        // recompute with cluster two removed and compare the cluster-one
        // gradients.
        let world1 = small_world(
            vec![vec![0.0, 0.0, 0.1, 0.0], vec![0.3, 0.0, -0.1, 0.0]],
            vec![vec![0.5, 0.0], vec![-0.2, 0.0]],
        );
        let mut t1 = transition_from(&env, &params, world1);
        let nom1: Vec<Vec<f64>> = (0..2)
            .map(|i| env.nominal(&t1.world.states[i], &t1.world.goals[i]))
            .collect();
        t1.control_targets = Some(nom1);
        let world2 = small_world(
            vec![vec![3.0, 3.0, 0.1, 0.0], vec![3.3, 3.0, -0.1, 0.0]],
            vec![vec![3.5, 3.0], vec![2.8, 3.0]],
        );
        let mut t2 = transition_from(&env, &params, world2);
        let nom2: Vec<Vec<f64>> = (0..2)
            .map(|i| env.nominal(&t2.world.states[i], &t2.world.goals[i]))
            .collect();
        t2.control_targets = Some(nom2);
        let labels2 = vec![Label::Unlabeled; 2];
        let split = loss_and_gradients(
            &env,
            &params,
            &[(&t1, &labels2), (&t2, &labels2)],
            &weights,
        )
        .unwrap();
        // Identical totals and identical policy gradients: the loss and its
        // gradient decompose over disconnected components.
        assert!((base.terms.total() - split.terms.total()).abs() < 1e-12);
        for (a, b) in base.grad_policy.iter().zip(&split.grad_policy) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn train_step_is_deterministic_and_lr_zero_is_identity() {
        let env = di_env();
        let cfg = TrainConfig { total_steps: 2, batch_size: 4, n_scenarios: 2, rollout_len: 4, ..TrainConfig::defaults(env.kind) };
        let params0 = init_params(RngState::new(13), env.kind);
        let (dataset, _) = collect_round(&env, &params0, &cfg, RngState::new(21)).unwrap();
        let batch = sample_batch(dataset.len(), 4, RngState::new(5));

        let run = |lr_scale: f64| {
            let mut params = params0.clone();
            let mut cfg2 = cfg.clone();
            cfg2.lr_cbf *= lr_scale;
            cfg2.lr_policy *= lr_scale;
            let mut opt = Optimizers::new(&cfg2, &params);
            train_step(&env, &mut params, &mut opt, &dataset, &batch, &cfg2.weights()).unwrap();
            params
        };
        let a = run(1.0);
        let b = run(1.0);
        assert_eq!(a.certificate.encoder.layers[0].weight, b.certificate.encoder.layers[0].weight);
        assert_eq!(a.policy.head.layers[2].weight, b.policy.head.layers[2].weight);

        let frozen = run(0.0);
        assert_eq!(frozen.certificate.encoder.layers[0].weight, params0.certificate.encoder.layers[0].weight);
        assert_eq!(frozen.policy.head.layers[2].weight, params0.policy.head.layers[2].weight);
    }

    #[test]
    fn loss_trends_down_on_a_fixed_batch() {
        let env = di_env();
        let mut cfg = TrainConfig::defaults(env.kind);
        // Larger learning rates make the trend visible in 50 steps.
        cfg.lr_cbf = 3e-4;
        cfg.lr_policy = 3e-4;
        cfg.n_scenarios = 2;
        cfg.rollout_len = 8;
        let mut params = init_params(RngState::new(14), env.kind);
        let (dataset, _) = collect_round(&env, &params, &cfg, RngState::new(22)).unwrap();
        let batch: Vec<usize> = (0..dataset.len().min(8)).collect();
        let mut opt = Optimizers::new(&cfg, &params);
        let mut first = 0.0;
        let mut last = 0.0;
        for step in 0..50 {
            let terms =
                train_step(&env, &mut params, &mut opt, &dataset, &batch, &cfg.weights()).unwrap();
            if step < 10 {
                first += terms.total();
            }
            if step >= 40 {
                last += terms.total();
            }
        }
        assert!(last < first, "mean of last 10 ({last}) vs first 10 ({first})");
    }
}
