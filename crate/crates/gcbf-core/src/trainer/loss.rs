//! The training loss, built on the tape.
//!
//! For a batch of transitions the loss is
//!
//! ```text
//! L = eta_deriv * sum [gamma - h_dot - alpha h]^+        (all agents)
//!   +             sum [gamma - h]^+                      (control-invariant)
//!   +             sum [gamma + h]^+                      (unsafe)
//!   + eta_ctrl  * sum ||pi(z_i) - target_i||             (all agents)
//! ```
//!
//! with `h_dot` the one-step finite difference `(h(z(t+dt)) - h(z(t))) / dt`
//! where the next state is re-stepped under the current policy, so the
//! derivative term backpropagates into the controls of every agent in the
//! neighborhood, not just the receiver.
//!
//! The map from controls to next-step edge features is placed on the tape
//! as an affine function matched to the exact nonlinear step at the
//! evaluation point: values equal the true stepped features and gradients
//! equal the true chain rule `J_e(x') * dt * g(x)` there, which is all the
//! reverse pass consumes. LiDAR returns at the stepped state are recast and
//! treated as fixed world points.

use rayon::prelude::*;

use crate::dynamics::Env;
use crate::gnn::{
    bind_core, core_on_tape, edge_batch, policy_on_tape, BoundCore, GnnParams,
};
use crate::numerics::{NumericsError, Tape, Tensor, VarId};
use crate::world::{build_graph, NodeKind, WorldError};

use super::rollout::{Label, Transition};

#[derive(Debug, thiserror::Error)]
pub enum TrainerError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Dynamics(#[from] crate::dynamics::DynamicsError),
    #[error("transition has no control targets; compute them at collection time")]
    MissingTargets,
}

/// Loss weights and constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub gamma: f64,
    pub eta_deriv: f64,
    pub eta_ctrl: f64,
}

/// Weighted per-term sums over a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub derivative: f64,
    pub safe: f64,
    pub unsafe_: f64,
    pub control: f64,
    pub n_transitions: usize,
    pub n_invariant: usize,
    pub n_unsafe: usize,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.derivative + self.safe + self.unsafe_ + self.control
    }

    fn add(&mut self, other: &LossTerms) {
        self.derivative += other.derivative;
        self.safe += other.safe;
        self.unsafe_ += other.unsafe_;
        self.control += other.control;
        self.n_transitions += other.n_transitions;
        self.n_invariant += other.n_invariant;
        self.n_unsafe += other.n_unsafe;
    }
}

/// Loss terms plus parameter gradients, ordered like
/// `GnnCore::named_tensors`.
pub struct LossGrads {
    pub terms: LossTerms,
    pub grad_certificate: Vec<Tensor>,
    pub grad_policy: Vec<Tensor>,
}

/// Number of gradient shards; fixed so results do not depend on the worker
/// pool size.
const SHARDS: usize = 8;

/// Batch loss and gradients, sharded deterministically.
pub fn loss_and_gradients(
    env: &Env,
    params: &GnnParams,
    items: &[(&Transition, &[Label])],
    weights: &LossWeights,
) -> Result<LossGrads, TrainerError> {
    if items.is_empty() {
        return Ok(LossGrads {
            terms: LossTerms::default(),
            grad_certificate: zero_grads(params, true),
            grad_policy: zero_grads(params, false),
        });
    }
    let chunk = items.len().div_ceil(SHARDS);
    let shards: Vec<&[(&Transition, &[Label])]> = items.chunks(chunk).collect();
    let results: Vec<Result<LossGrads, TrainerError>> = shards
        .par_iter()
        .map(|shard| shard_loss(env, params, shard, weights))
        .collect();

    let mut total: Option<LossGrads> = None;
    for r in results {
        let r = r?;
        match &mut total {
            None => total = Some(r),
            Some(acc) => {
                acc.terms.add(&r.terms);
                for (a, b) in acc.grad_certificate.iter_mut().zip(&r.grad_certificate) {
                    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += y;
                    }
                }
                for (a, b) in acc.grad_policy.iter_mut().zip(&r.grad_policy) {
                    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += y;
                    }
                }
            }
        }
    }
    Ok(total.expect("at least one shard"))
}

fn zero_grads(params: &GnnParams, certificate: bool) -> Vec<Tensor> {
    let core = if certificate { &params.certificate } else { &params.policy };
    core.tensor_shapes().iter().map(|&(r, c)| Tensor::zeros(r, c)).collect()
}

fn shard_loss(
    env: &Env,
    params: &GnnParams,
    items: &[(&Transition, &[Label])],
    weights: &LossWeights,
) -> Result<LossGrads, TrainerError> {
    let mut tape = Tape::new();
    let cert = bind_core(&mut tape, &params.certificate, true)?;
    let policy = bind_core(&mut tape, &params.policy, true)?;

    let mut deriv_parts = Vec::new();
    let mut safe_parts = Vec::new();
    let mut unsafe_parts = Vec::new();
    let mut ctrl_parts = Vec::new();
    let mut terms = LossTerms { n_transitions: items.len(), ..Default::default() };

    for (transition, labels) in items {
        transition_loss(
            &mut tape,
            &cert,
            &policy,
            env,
            transition,
            labels,
            weights,
            &mut deriv_parts,
            &mut safe_parts,
            &mut unsafe_parts,
            &mut ctrl_parts,
        )?;
        terms.n_invariant += labels.iter().filter(|&&l| l == Label::ControlInvariant).count();
        terms.n_unsafe += labels.iter().filter(|&&l| l == Label::Unsafe).count();
    }

    let deriv_sum = sum_scalars(&mut tape, &deriv_parts)?;
    let safe_sum = sum_scalars(&mut tape, &safe_parts)?;
    let unsafe_sum = sum_scalars(&mut tape, &unsafe_parts)?;
    let ctrl_sum = sum_scalars(&mut tape, &ctrl_parts)?;

    let wd = tape.scalar_mul(deriv_sum, weights.eta_deriv)?;
    let wc = tape.scalar_mul(ctrl_sum, weights.eta_ctrl)?;
    let s1 = tape.add(wd, safe_sum)?;
    let s2 = tape.add(unsafe_sum, wc)?;
    let total = tape.add(s1, s2)?;

    terms.derivative = tape.value(wd).item();
    terms.safe = tape.value(safe_sum).item();
    terms.unsafe_ = tape.value(unsafe_sum).item();
    terms.control = tape.value(wc).item();

    let grads = tape.backward(total, Tensor::scalar(1.0))?;
    Ok(LossGrads {
        terms,
        grad_certificate: cert.gradient_tensors(&tape, &grads),
        grad_policy: policy.gradient_tensors(&tape, &grads),
    })
}

fn sum_scalars(tape: &mut Tape, parts: &[VarId]) -> Result<VarId, NumericsError> {
    match parts {
        [] => tape.constant(Tensor::scalar(0.0)),
        [one] => Ok(*one),
        many => {
            let col = tape.concat_rows(many)?;
            tape.sum_all(col)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn transition_loss(
    tape: &mut Tape,
    cert: &BoundCore,
    policy: &BoundCore,
    env: &Env,
    transition: &Transition,
    labels: &[Label],
    weights: &LossWeights,
    deriv_parts: &mut Vec<VarId>,
    safe_parts: &mut Vec<VarId>,
    unsafe_parts: &mut Vec<VarId>,
    ctrl_parts: &mut Vec<VarId>,
) -> Result<(), TrainerError> {
    let world = &transition.world;
    let n = world.n_agents();
    let m = env.kind.control_dim();
    let dt = transition.dt;
    let graph_k = world.graph(env);
    let batch_k = edge_batch(&graph_k);

    // Policy at t_k (straight-through clamped executed controls).
    let u_nom: Vec<f64> = (0..n)
        .flat_map(|i| env.nominal(&world.states[i], &world.goals[i]))
        .collect();
    let u_nom = Tensor::new(n, m, u_nom).expect("nominal shape");
    let z_k = tape.constant(batch_k.z.clone())?;
    let u_exec = policy_on_tape(tape, policy, z_k, &batch_k.ranges, &u_nom, env)?;
    let u_val = tape.value(u_exec).clone();

    // Certificate at t_k.
    let h_k = core_on_tape(tape, cert, z_k, &batch_k.ranges)?;

    // Exact stepped world at the executed control values.
    let mut next = world.clone();
    for (i, x) in next.states.iter_mut().enumerate() {
        *x = env.step(x, u_val.row_slice(i), dt)?;
    }
    next.time_index += 1;
    let scan_next = next.lidar_scan();
    let graph_next = build_graph(env, &next, &scan_next);

    // Stepped per-agent features as affine tape functions of the controls,
    // matched to the exact values.
    let mut stepped_feats: Vec<VarId> = Vec::with_capacity(n);
    for i in 0..n {
        let x_now = &world.states[i];
        let x_next = &next.states[i];
        let jac = env.feature_jacobian(x_next);
        let g = env.control_matrix(x_now)?;
        let rho = env.kind.edge_dim();
        // A = J_e(x') * dt * g(x), stored transposed for a row-vector matmul.
        let mut a_t = vec![0.0; m * rho];
        for (r, jrow) in jac.iter().enumerate() {
            for c in 0..m {
                let mut acc = 0.0;
                for (k, jv) in jrow.iter().enumerate() {
                    acc += jv * g[k][c];
                }
                a_t[c * rho + r] = dt * acc;
            }
        }
        let e_next = env.feature_map(x_next);
        let mut offset = e_next.clone();
        for (r, o) in offset.iter_mut().enumerate() {
            let mut au = 0.0;
            for c in 0..m {
                au += a_t[c * rho + r] * u_val.at(i, c);
            }
            *o -= au;
        }
        let u_row = tape.slice_rows(u_exec, i..i + 1)?;
        let a_t = tape.constant(Tensor::new(m, rho, a_t).expect("jacobian shape"))?;
        let lin = tape.matmul(u_row, a_t)?;
        let off = tape.constant(Tensor::row(offset))?;
        stepped_feats.push(tape.add(lin, off)?);
    }

    // Edge feature rows of the stepped graph.
    let mut rows = Vec::with_capacity(graph_next.edges.len());
    let mut onehots = Vec::with_capacity(graph_next.edges.len() * 6);
    for edge in &graph_next.edges {
        onehots.extend_from_slice(&graph_next.nodes[edge.receiver].kind.one_hot());
        onehots.extend_from_slice(&graph_next.nodes[edge.sender].kind.one_hot());
        let row = match graph_next.nodes[edge.sender].kind {
            NodeKind::Agent => {
                tape.sub(stepped_feats[edge.sender], stepped_feats[edge.receiver])?
            }
            NodeKind::Goal | NodeKind::LidarHit => {
                let feat = env.feature_map(&graph_next.nodes[edge.sender].state);
                let c = tape.constant(Tensor::row(feat))?;
                tape.sub(c, stepped_feats[edge.receiver])?
            }
        };
        rows.push(row);
    }
    let e_next = tape.concat_rows(&rows)?;
    let oh = tape.constant(Tensor::new(graph_next.edges.len(), 6, onehots).expect("onehot shape"))?;
    let z_next = tape.concat_cols(&[oh, e_next])?;
    let ranges_next: Vec<_> = (0..n).map(|i| graph_next.edge_range(i)).collect();
    let h_next = core_on_tape(tape, cert, z_next, &ranges_next)?;

    // Derivative hinge over every agent.
    let dh = tape.sub(h_next, h_k)?;
    let hdot = tape.scalar_mul(dh, 1.0 / dt)?;
    let neg_hdot = tape.scalar_mul(hdot, -1.0)?;
    let neg_ah = tape.scalar_mul(h_k, -weights.alpha)?;
    let s = tape.add(neg_hdot, neg_ah)?;
    let gamma_col = tape.constant(Tensor::new(n, 1, vec![weights.gamma; n]).expect("gamma shape"))?;
    let arg = tape.add(s, gamma_col)?;
    let hng = tape.hinge(arg)?;
    deriv_parts.push(tape.sum_all(hng)?);

    // Label hinges via 0/1 gather matrices.
    let gather = |tape: &mut Tape, idx: &[usize]| -> Result<VarId, NumericsError> {
        let mut sel = vec![0.0; idx.len() * n];
        for (r, &i) in idx.iter().enumerate() {
            sel[r * n + i] = 1.0;
        }
        let sel = tape.constant(Tensor::new(idx.len(), n, sel).expect("gather shape"))?;
        tape.matmul(sel, h_k)
    };
    let invariant: Vec<usize> = (0..n).filter(|&i| labels[i] == Label::ControlInvariant).collect();
    if !invariant.is_empty() {
        let hs = gather(tape, &invariant)?;
        let g = tape.constant(Tensor::new(invariant.len(), 1, vec![weights.gamma; invariant.len()])
            .expect("gamma shape"))?;
        let arg = tape.sub(g, hs)?;
        let hng = tape.hinge(arg)?;
        safe_parts.push(tape.sum_all(hng)?);
    }
    let unsafe_idx: Vec<usize> = (0..n).filter(|&i| labels[i] == Label::Unsafe).collect();
    if !unsafe_idx.is_empty() {
        let hs = gather(tape, &unsafe_idx)?;
        let g = tape.constant(Tensor::new(unsafe_idx.len(), 1, vec![weights.gamma; unsafe_idx.len()])
            .expect("gamma shape"))?;
        let arg = tape.add(hs, g)?;
        let hng = tape.hinge(arg)?;
        unsafe_parts.push(tape.sum_all(hng)?);
    }

    // Control loss against the fixed targets.
    let targets = transition.control_targets.as_ref().ok_or(TrainerError::MissingTargets)?;
    let target: Vec<f64> = targets.iter().flatten().copied().collect();
    let target = tape.constant(Tensor::new(n, m, target).expect("target shape"))?;
    let diff = tape.sub(u_exec, target)?;
    for i in 0..n {
        let row = tape.slice_rows(diff, i..i + 1)?;
        ctrl_parts.push(tape.norm2(row)?);
    }
    Ok(())
}

/// Finite-difference estimate of `h_dot` for every agent of a transition,
/// re-stepping the world under the given parameters.
pub fn hdot_estimates(
    env: &Env,
    params: &GnnParams,
    transition: &Transition,
) -> Result<Vec<f64>, TrainerError> {
    let world = &transition.world;
    let (_, next) = super::rollout::step_world_with_policy(env, params, world, transition.dt)?;
    let h_now = crate::gnn::certificate_values(&params.certificate, &edge_batch(&world.graph(env)));
    let h_next = crate::gnn::certificate_values(&params.certificate, &edge_batch(&next.graph(env)));
    Ok(h_now
        .iter()
        .zip(&h_next)
        .map(|(a, b)| (b - a) / transition.dt)
        .collect())
}
