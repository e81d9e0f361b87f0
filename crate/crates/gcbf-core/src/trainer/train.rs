//! The learning loop: collect on-policy data, label it, fix control
//! targets, and run Adam on the joint loss.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Env, EnvKind, DEFAULT_DT};
use crate::gnn::{init_params, GnnParams};
use crate::numerics::{AdamState, RngState};
use crate::qp::pi_qp_target;
use crate::world::ScenarioParams;

use super::loss::{loss_and_gradients, LossTerms, LossWeights, TrainerError};
use super::rollout::{collect_onpolicy, label_invariance, sample_batch, LabeledDataset, Label};

/// What the control loss pulls the policy toward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlLossTarget {
    /// The QP-filtered safe control (the full method).
    Qp,
    /// The raw nominal controller (ablation).
    Nominal,
}

/// Training hyperparameters. `defaults(env)` fills the per-environment
/// values; the rollout schedule constants are implementation choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Labeling horizon T, in steps.
    pub horizon: usize,
    pub eta_ctrl: f64,
    pub eta_deriv: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub lr_policy: f64,
    pub lr_cbf: f64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub n_scenarios: usize,
    pub rollout_len: usize,
    /// Refresh the buffer every this many gradient steps.
    pub collect_every: u64,
    pub control_loss_target: ControlLossTarget,
    pub n_agents: usize,
    pub n_obstacles: usize,
    pub area_width: f64,
    pub dt: f64,
}

impl TrainConfig {
    pub fn defaults(env: EnvKind) -> Self {
        let (horizon, eta_ctrl, lr_policy, lr_cbf) = match env {
            EnvKind::SingleIntegrator => (1, 1e-4, 1e-5, 1e-5),
            EnvKind::DoubleIntegrator => (32, 1e-4, 1e-5, 1e-5),
            EnvKind::DubinsCar => (32, 1e-5, 3e-5, 3e-5),
            EnvKind::LinearDrone => (32, 1e-3, 1e-5, 1e-5),
            EnvKind::CrazyflieDrone => (32, 3e-5, 1e-5, 1e-4),
        };
        Self {
            horizon,
            eta_ctrl,
            eta_deriv: 0.2,
            gamma: 0.02,
            alpha: 1.0,
            lr_policy,
            lr_cbf,
            total_steps: 1000,
            batch_size: 16,
            n_scenarios: 16,
            rollout_len: 64,
            collect_every: 32,
            control_loss_target: ControlLossTarget::Qp,
            n_agents: 8,
            n_obstacles: 8,
            area_width: if env.pos_dim() == 2 { 4.0 } else { 2.0 },
            dt: DEFAULT_DT,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            gamma: self.gamma,
            eta_deriv: self.eta_deriv,
            eta_ctrl: self.eta_ctrl,
        }
    }

    pub fn scenario_params(&self, env: EnvKind) -> ScenarioParams {
        ScenarioParams::new(env, self.n_agents, self.area_width, self.n_obstacles)
    }
}

/// One loss-log record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub total: f64,
    pub derivative: f64,
    pub safe: f64,
    pub unsafe_: f64,
    pub control: f64,
    pub n_invariant: usize,
    pub n_unsafe: usize,
    /// Fraction of buffer transitions whose target QP needed slack.
    pub relaxed_fraction: f64,
    pub wall_ms: u64,
}

/// Optimizer pair for the two networks.
pub struct Optimizers {
    pub certificate: AdamState,
    pub policy: AdamState,
}

impl Optimizers {
    pub fn new(cfg: &TrainConfig, params: &GnnParams) -> Self {
        Self {
            certificate: AdamState::new(cfg.lr_cbf, &params.certificate.tensor_shapes()),
            policy: AdamState::new(cfg.lr_policy, &params.policy.tensor_shapes()),
        }
    }
}

/// One Adam step on a batch of labeled transitions.
pub fn train_step(
    env: &Env,
    params: &mut GnnParams,
    opt: &mut Optimizers,
    dataset: &LabeledDataset,
    batch: &[usize],
    weights: &LossWeights,
) -> Result<LossTerms, TrainerError> {
    let items: Vec<_> = batch
        .iter()
        .map(|&t| (&dataset.transitions[t], dataset.labels[t].as_slice()))
        .collect();
    let out = loss_and_gradients(env, params, &items, weights)?;
    opt.certificate
        .update_refs(&mut params.certificate.tensors_mut(), &out.grad_certificate)?;
    opt.policy.update_refs(&mut params.policy.tensors_mut(), &out.grad_policy)?;
    Ok(out.terms)
}

/// Collect, label, and attach control targets for one buffer round, using
/// the current parameters (the certificate of the previous learning step).
pub fn collect_round(
    env: &Env,
    params: &GnnParams,
    cfg: &TrainConfig,
    rng: RngState,
) -> Result<(LabeledDataset, f64), TrainerError> {
    let scenario = cfg.scenario_params(env.kind);
    let transitions = collect_onpolicy(
        env,
        params,
        &scenario,
        cfg.n_scenarios,
        cfg.rollout_len,
        cfg.dt,
        rng.split(1),
    )?;
    let mut dataset = label_invariance(env, params, &transitions, cfg.horizon)?;

    // Control targets, held fixed for the round.
    let targets: Vec<Result<(Vec<Vec<f64>>, bool), TrainerError>> = dataset
        .transitions
        .par_iter()
        .map(|t| {
            let u_nom: Vec<Vec<f64>> = (0..t.world.n_agents())
                .map(|i| env.nominal(&t.world.states[i], &t.world.goals[i]))
                .collect();
            match cfg.control_loss_target {
                ControlLossTarget::Nominal => {
                    let clamped = u_nom.iter().map(|u| env.limits.clamp(u)).collect();
                    Ok((clamped, false))
                }
                ControlLossTarget::Qp => {
                    let graph = t.world.graph(env);
                    let out =
                        pi_qp_target(env, &params.certificate, &graph, cfg.alpha, &u_nom)
                            .map_err(|e| match e {
                                crate::qp::ControllerError::Numerics(n) => TrainerError::Numerics(n),
                                crate::qp::ControllerError::Dynamics(d) => TrainerError::Dynamics(d),
                                crate::qp::ControllerError::Qp(q) => {
                                    TrainerError::Numerics(crate::numerics::NumericsError::ShapeMismatch {
                                        op: "qp",
                                        detail: q.to_string(),
                                    })
                                }
                            })?;
                    Ok((out.controls, out.relaxed))
                }
            }
        })
        .collect();

    let mut relaxed = 0usize;
    for (t, res) in dataset.transitions.iter_mut().zip(targets) {
        let (controls, was_relaxed) = res?;
        t.control_targets = Some(controls);
        relaxed += usize::from(was_relaxed);
    }
    let relaxed_fraction = relaxed as f64 / dataset.transitions.len().max(1) as f64;
    Ok((dataset, relaxed_fraction))
}

/// Result of a full training run.
pub struct TrainResult {
    pub params: GnnParams,
    pub loss_log: Vec<LossRecord>,
}

/// Full training: alternate buffer refreshes and gradient steps for
/// `total_steps`, reporting checkpoints through `on_checkpoint`.
pub fn train(
    env: &Env,
    cfg: &TrainConfig,
    rng: RngState,
    mut on_checkpoint: impl FnMut(u64, &GnnParams) -> Result<(), TrainerError>,
) -> Result<TrainResult, TrainerError> {
    let mut params = init_params(rng.split(0), env.kind);
    let mut opt = Optimizers::new(cfg, &params);
    let weights = cfg.weights();

    let mut dataset = LabeledDataset::default();
    let mut relaxed_fraction = 0.0;
    let mut loss_log = Vec::with_capacity(cfg.total_steps as usize);
    let started = std::time::Instant::now();

    for step in 0..cfg.total_steps {
        if step % cfg.collect_every == 0 {
            let round = step / cfg.collect_every;
            let (d, rf) = collect_round(env, &params, cfg, rng.split(1000 + round))?;
            dataset = d;
            relaxed_fraction = rf;
        }
        let batch = sample_batch(dataset.len(), cfg.batch_size, rng.split(2_000_000 + step));
        let terms = train_step(env, &mut params, &mut opt, &dataset, &batch, &weights)?;
        loss_log.push(LossRecord {
            step,
            total: terms.total(),
            derivative: terms.derivative,
            safe: terms.safe,
            unsafe_: terms.unsafe_,
            control: terms.control,
            n_invariant: terms.n_invariant,
            n_unsafe: terms.n_unsafe,
            relaxed_fraction,
            wall_ms: started.elapsed().as_millis() as u64,
        });
        if (step + 1) % 250 == 0 {
            on_checkpoint(step + 1, &params)?;
        }
    }
    Ok(TrainResult { params, loss_log })
}

/// Count labels in a dataset, for logs and tests.
pub fn label_counts(dataset: &LabeledDataset) -> (usize, usize, usize) {
    (
        dataset.count(Label::ControlInvariant),
        dataset.count(Label::Unsafe),
        dataset.count(Label::Unlabeled),
    )
}
