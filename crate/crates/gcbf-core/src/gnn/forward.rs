//! Forward passes of the certificate and policy networks.
//!
//! Per-edge inputs `z_ij = [v_i, v_j, e_ij]` run through the edge encoder;
//! attention weights come from a softmax over each receiver's gate logits;
//! the weighted sum of value features feeds the output head:
//!
//! `h_i = head( sum_j softmax_j(gate(q_ij)) * value(q_ij) )`, `q_ij = encoder(z_ij)`.
//!
//! Two code paths share this structure: a plain matrix path for rollouts and
//! evaluation, and a tape path for gradients. Both batch all edges of a
//! graph into one `[E, d]` matrix and keep each receiver's rows contiguous,
//! so results do not depend on how many agents share the batch.

use std::ops::Range;

use crate::dynamics::Env;
use crate::numerics::{Gradients, NumericsError, Tape, Tensor, VarId};
use crate::world::{NodeKind, SceneGraph};

use super::params::{edge_input_dim, GnnCore, Mlp};

/// All edges of a graph as one matrix, rows grouped by receiver.
#[derive(Debug, Clone)]
pub struct EdgeBatch {
    pub z: Tensor,
    /// Row range of each agent's incoming edges.
    pub ranges: Vec<Range<usize>>,
}

/// Assemble `[v_i, v_j, e_ij]` rows for every edge.
pub fn edge_batch(graph: &SceneGraph) -> EdgeBatch {
    let d = graph.edges.first().map(|e| 6 + e.feature.len()).unwrap_or(6);
    let mut data = Vec::with_capacity(graph.edges.len() * d);
    for edge in &graph.edges {
        data.extend_from_slice(&graph.nodes[edge.receiver].kind.one_hot());
        data.extend_from_slice(&graph.nodes[edge.sender].kind.one_hot());
        data.extend_from_slice(&edge.feature);
    }
    let z = Tensor::new(graph.edges.len(), d, data).expect("edge batch shape");
    let ranges = (0..graph.n_agents).map(|i| graph.edge_range(i)).collect();
    EdgeBatch { z, ranges }
}

// ---------------------------------------------------------------------------
// Plain matrix path.
// ---------------------------------------------------------------------------

/// Head outputs `[N, out]` for every agent.
pub fn core_forward(core: &GnnCore, batch: &EdgeBatch) -> Tensor {
    let q = core.encoder.forward_raw(&batch.z);
    let logits = core.gate.forward_raw(&q);
    let feats = core.value.forward_raw(&q);
    let fdim = feats.cols();
    let n = batch.ranges.len();
    let mut agg = Tensor::zeros(n, fdim);
    for (i, range) in batch.ranges.iter().enumerate() {
        let w = softmax_slice(logits.data(), range.clone());
        let out = &mut agg.data_mut()[i * fdim..(i + 1) * fdim];
        for (k, row) in range.clone().enumerate() {
            let f = feats.row_slice(row);
            let wk = w[k];
            for (o, &fv) in out.iter_mut().zip(f) {
                *o += wk * fv;
            }
        }
    }
    core.head.forward_raw(&agg)
}

/// Certificate values `h_i` for every agent.
pub fn certificate_values(core: &GnnCore, batch: &EdgeBatch) -> Vec<f64> {
    core_forward(core, batch).into_data()
}

/// Executed controls `clamp(head_i + u_nom_i)` for every agent.
pub fn policy_controls(
    env: &Env,
    core: &GnnCore,
    batch: &EdgeBatch,
    u_nom: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let dev = core_forward(core, batch);
    u_nom
        .iter()
        .enumerate()
        .map(|(i, nom)| {
            let raw: Vec<f64> = dev.row_slice(i).iter().zip(nom).map(|(d, n)| d + n).collect();
            env.limits.clamp(&raw)
        })
        .collect()
}

/// Attention weights of agent `i`: `(sender node, w)` per incoming edge.
pub fn attention_weights(core: &GnnCore, graph: &SceneGraph, i: usize) -> Vec<(usize, f64)> {
    let batch = edge_batch(graph);
    let q = core.encoder.forward_raw(&batch.z);
    let logits = core.gate.forward_raw(&q);
    let range = batch.ranges[i].clone();
    let w = softmax_slice(logits.data(), range.clone());
    graph
        .incoming(i)
        .iter()
        .zip(w)
        .map(|(edge, wk)| (edge.sender, wk))
        .collect()
}

fn softmax_slice(logits: &[f64], range: Range<usize>) -> Vec<f64> {
    let mx = range.clone().map(|r| logits[r]).fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = range.map(|r| (logits[r] - mx).exp()).collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

// ---------------------------------------------------------------------------
// Tape path.
// ---------------------------------------------------------------------------

/// Tape handles for one MLP's layers.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    pub layers: Vec<(VarId, VarId)>,
}

/// Tape handles for a whole network.
#[derive(Debug, Clone)]
pub struct BoundCore {
    pub encoder: BoundMlp,
    pub gate: BoundMlp,
    pub value: BoundMlp,
    pub head: BoundMlp,
}

fn bind_mlp(tape: &mut Tape, mlp: &Mlp, trainable: bool) -> Result<BoundMlp, NumericsError> {
    let mut layers = Vec::with_capacity(mlp.layers.len());
    for layer in &mlp.layers {
        let ids = if trainable {
            (tape.input(layer.weight.clone())?, tape.input(layer.bias.clone())?)
        } else {
            (tape.constant(layer.weight.clone())?, tape.constant(layer.bias.clone())?)
        };
        layers.push(ids);
    }
    Ok(BoundMlp { layers })
}

/// Put the network's tensors on a tape, as trainable inputs or constants.
pub fn bind_core(tape: &mut Tape, core: &GnnCore, trainable: bool) -> Result<BoundCore, NumericsError> {
    Ok(BoundCore {
        encoder: bind_mlp(tape, &core.encoder, trainable)?,
        gate: bind_mlp(tape, &core.gate, trainable)?,
        value: bind_mlp(tape, &core.value, trainable)?,
        head: bind_mlp(tape, &core.head, trainable)?,
    })
}

impl BoundCore {
    /// Gradient tensors in [`GnnCore::named_tensors`] order.
    pub fn gradient_tensors(&self, tape: &Tape, grads: &Gradients) -> Vec<Tensor> {
        [&self.encoder, &self.gate, &self.value, &self.head]
            .into_iter()
            .flat_map(|mlp| mlp.layers.iter())
            .flat_map(|&(w, b)| [grads.get(tape, w), grads.get(tape, b)])
            .collect()
    }
}

pub fn mlp_on_tape(tape: &mut Tape, mlp: &BoundMlp, x: VarId) -> Result<VarId, NumericsError> {
    let mut h = x;
    let last = mlp.layers.len() - 1;
    for (i, &(w, b)) in mlp.layers.iter().enumerate() {
        h = tape.matmul(h, w)?;
        h = tape.add_row(h, b)?;
        if i < last {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Full network on the tape; returns the `[N, out]` head output.
pub fn core_on_tape(
    tape: &mut Tape,
    core: &BoundCore,
    z: VarId,
    ranges: &[Range<usize>],
) -> Result<VarId, NumericsError> {
    let q = mlp_on_tape(tape, &core.encoder, z)?;
    let logits = mlp_on_tape(tape, &core.gate, q)?;
    let feats = mlp_on_tape(tape, &core.value, q)?;
    let mut agg = Vec::with_capacity(ranges.len());
    for range in ranges {
        assert!(range.end > range.start, "agent without incoming edges");
        let l = tape.slice_rows(logits, range.clone())?;
        let w = tape.softmax(l, 0)?;
        let f = tape.slice_rows(feats, range.clone())?;
        let weighted = tape.mul_col(f, w)?;
        agg.push(tape.sum_axis(weighted, 0)?);
    }
    let stacked = tape.concat_rows(&agg)?;
    mlp_on_tape(tape, &core.head, stacked)
}

/// Policy on the tape: head output plus nominal, clamped straight-through.
///
/// The executed value is the clamped control, but the clamp correction is a
/// constant, so gradients flow through the pre-clamp value.
pub fn policy_on_tape(
    tape: &mut Tape,
    core: &BoundCore,
    z: VarId,
    ranges: &[Range<usize>],
    u_nom: &Tensor,
    env: &Env,
) -> Result<VarId, NumericsError> {
    let dev = core_on_tape(tape, core, z, ranges)?;
    let nom = tape.constant(u_nom.clone())?;
    let raw = tape.add(dev, nom)?;
    let raw_val = tape.value(raw).clone();
    let mut corr = raw_val.clone();
    let m = corr.cols();
    for (k, v) in corr.data_mut().iter_mut().enumerate() {
        let clamped = (*v).clamp(env.limits.lo[k % m], env.limits.hi[k % m]);
        *v = clamped - *v;
    }
    let corr = tape.constant(corr)?;
    tape.add(raw, corr)
}

// ---------------------------------------------------------------------------
// State gradients of the certificate.
// ---------------------------------------------------------------------------

/// Certificate values and their gradients with respect to agent states,
/// obtained from one reverse pass (each edge feeds exactly one receiver).
/// LiDAR hit points are treated as fixed world points, so their motion does
/// not contribute; the receiver's own gradient includes every incoming edge.
#[derive(Debug, Clone)]
pub struct CertificateGradients {
    pub values: Vec<f64>,
    /// `d h_i / d x_i`.
    pub wrt_self: Vec<Vec<f64>>,
    /// Per receiver: `(sender agent j, d h_i / d x_j)`.
    pub wrt_senders: Vec<Vec<(usize, Vec<f64>)>>,
}

pub fn certificate_state_gradients(
    env: &Env,
    core: &GnnCore,
    graph: &SceneGraph,
) -> Result<CertificateGradients, NumericsError> {
    let batch = edge_batch(graph);
    let mut tape = Tape::new();
    let z = tape.input(batch.z.clone())?;
    let bound = bind_core(&mut tape, core, false)?;
    let h = core_on_tape(&mut tape, &bound, z, &batch.ranges)?;
    let n = graph.n_agents;
    let seed = Tensor::new(n, 1, vec![1.0; n]).expect("seed shape");
    let grads = tape.backward(h, seed)?;
    let dz = grads.get(&tape, z);

    let values = tape.value(h).data().to_vec();
    let state_dim = env.kind.state_dim();
    let d_in = edge_input_dim(env.kind);
    let mut wrt_self = vec![vec![0.0; state_dim]; n];
    let mut wrt_senders: Vec<Vec<(usize, Vec<f64>)>> = vec![Vec::new(); n];

    let jac_recv: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|i| env.feature_jacobian(&graph.nodes[i].state))
        .collect();

    for (row, edge) in graph.edges.iter().enumerate() {
        let de = &dz.row_slice(row)[6..d_in];
        let i = edge.receiver;
        // e_ij = e(x_j) - e(x_i): the receiver term enters every edge.
        accumulate_chain(&mut wrt_self[i], &jac_recv[i], de, -1.0);
        let sender = &graph.nodes[edge.sender];
        if sender.kind == NodeKind::Agent {
            let jac = env.feature_jacobian(&sender.state);
            let mut g = vec![0.0; state_dim];
            accumulate_chain(&mut g, &jac, de, 1.0);
            wrt_senders[i].push((edge.sender, g));
        }
    }
    Ok(CertificateGradients { values, wrt_self, wrt_senders })
}

fn accumulate_chain(out: &mut [f64], jac: &[Vec<f64>], de: &[f64], sign: f64) {
    for (r, row) in jac.iter().enumerate() {
        let s = sign * de[r];
        if s == 0.0 {
            continue;
        }
        for (o, &j) in out.iter_mut().zip(row) {
            *o += s * j;
        }
    }
}
