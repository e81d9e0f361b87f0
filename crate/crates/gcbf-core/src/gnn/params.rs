//! Network parameters: four MLPs per network, two networks (certificate and
//! policy), with orthogonal initialization.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dynamics::EnvKind;
use crate::numerics::{RngState, Tensor};

/// One dense layer, weights `[in, out]`, bias `[1, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Plain MLP with relu between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// Layer widths, e.g. `[10, 256, 256, 128]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].weight.rows()];
        d.extend(self.layers.iter().map(|l| l.weight.cols()));
        d
    }

    /// Batched forward without a tape.
    pub fn forward_raw(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = crate::numerics::Tensor::zeros(h.rows(), layer.weight.cols());
            matmul_into(&h, &layer.weight, &mut out);
            let cols = out.cols();
            for (k, v) in out.data_mut().iter_mut().enumerate() {
                *v += layer.bias.data()[k % cols];
                if i < last && *v < 0.0 {
                    *v = 0.0;
                }
            }
            h = out;
        }
        h
    }
}

fn matmul_into(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    let (m, k) = a.shape();
    let n = b.cols();
    debug_assert_eq!(k, b.rows());
    let bd = b.data();
    for i in 0..m {
        let arow = a.row_slice(i);
        let orow = &mut out.data_mut()[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &bd[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// One GNN (certificate or policy): edge encoder, attention gate, value
/// encoder, and output head.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnCore {
    pub encoder: Mlp,
    pub gate: Mlp,
    pub value: Mlp,
    pub head: Mlp,
}

/// Feature width produced by the edge encoder and consumed by gate, value,
/// and head.
pub const FEATURE_DIM: usize = 128;
const HIDDEN_WIDE: usize = 256;
const HIDDEN_GATE: usize = 128;

/// Certificate and policy networks for one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnParams {
    pub env: EnvKind,
    pub certificate: GnnCore,
    pub policy: GnnCore,
}

/// Per-edge input width: one-hot node features of receiver and sender plus
/// the relative edge feature.
pub fn edge_input_dim(env: EnvKind) -> usize {
    3 + 3 + env.edge_dim()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HeadInit {
    /// Orthogonal at small scale: fresh certificate outputs stay below one.
    SmallScale,
    /// Zero: the fresh policy reproduces the nominal controller exactly.
    Zero,
}

/// Initialize both networks: hidden layers orthogonal with gain sqrt(2),
/// zero biases, a zeroed final layer for the policy and a small-scale final
/// layer for the certificate.
pub fn init_params(rng: RngState, env: EnvKind) -> GnnParams {
    let cert = init_core(rng.split(1), env, 1, HeadInit::SmallScale);
    let policy = init_core(rng.split(2), env, env.control_dim(), HeadInit::Zero);
    GnnParams { env, certificate: cert, policy }
}

fn init_core(rng: RngState, env: EnvKind, head_out: usize, head_init: HeadInit) -> GnnCore {
    let d_in = edge_input_dim(env);
    let gain = 2.0_f64.sqrt();
    let mk = |dims: &[usize], tag: u64, final_scale: Option<f64>| {
        let mut layers = Vec::new();
        for (li, w) in dims.windows(2).enumerate() {
            let scale = if li + 2 == dims.len() {
                match final_scale {
                    Some(s) => s,
                    None => gain,
                }
            } else {
                gain
            };
            let weight = if scale == 0.0 {
                Tensor::zeros(w[0], w[1])
            } else {
                orthogonal(rng.split(tag * 16 + li as u64), w[0], w[1], scale)
            };
            layers.push(Layer { weight, bias: Tensor::zeros(1, w[1]) });
        }
        Mlp { layers }
    };
    GnnCore {
        encoder: mk(&[d_in, HIDDEN_WIDE, HIDDEN_WIDE, FEATURE_DIM], 1, None),
        gate: mk(&[FEATURE_DIM, HIDDEN_GATE, HIDDEN_GATE, 1], 2, None),
        value: mk(&[FEATURE_DIM, HIDDEN_WIDE, HIDDEN_WIDE, FEATURE_DIM], 3, None),
        head: mk(
            &[FEATURE_DIM, HIDDEN_WIDE, HIDDEN_WIDE, head_out],
            4,
            Some(match head_init {
                HeadInit::SmallScale => 0.01,
                HeadInit::Zero => 0.0,
            }),
        ),
    }
}

/// Semi-orthogonal matrix `[rows, cols]` scaled by `gain`, from a seeded QR.
fn orthogonal(rng: RngState, rows: usize, cols: usize, gain: f64) -> Tensor {
    let mut gen = rng.rng();
    let (big, small) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::<f64>::from_fn(big, small, |_, _| gen.sample(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Fix signs so the decomposition is unique.
    for j in 0..small {
        if r[(j, j)] < 0.0 {
            for i in 0..big {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    let mut data = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let v = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
            data[i * cols + j] = gain * v;
        }
    }
    Tensor::new(rows, cols, data).expect("orthogonal shape")
}

impl GnnCore {
    /// All tensors with stable names, in checkpoint/optimizer order.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (mlp_name, mlp) in self.mlps() {
            for (i, layer) in mlp.layers.iter().enumerate() {
                out.push((format!("{prefix}.{mlp_name}.{i}.weight"), &layer.weight));
                out.push((format!("{prefix}.{mlp_name}.{i}.bias"), &layer.bias));
            }
        }
        out
    }

    pub fn mlps(&self) -> [(&'static str, &Mlp); 4] {
        [
            ("encoder", &self.encoder),
            ("gate", &self.gate),
            ("value", &self.value),
            ("head", &self.head),
        ]
    }

    pub fn mlps_mut(&mut self) -> [(&'static str, &mut Mlp); 4] {
        [
            ("encoder", &mut self.encoder),
            ("gate", &mut self.gate),
            ("value", &mut self.value),
            ("head", &mut self.head),
        ]
    }

    /// Flat list of mutable tensor references in the same order as
    /// [`GnnCore::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for (_, mlp) in self.mlps_mut() {
            for layer in &mut mlp.layers {
                out.push(&mut layer.weight);
                out.push(&mut layer.bias);
            }
        }
        out
    }

    pub fn tensor_shapes(&self) -> Vec<(usize, usize)> {
        self.named_tensors("x").iter().map(|(_, t)| t.shape()).collect()
    }
}

impl GnnParams {
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.certificate.named_tensors("certificate");
        out.extend(self.policy.named_tensors("policy"));
        out
    }
}
