//! The GNN certificate `h` and the distributed control policy: parameters,
//! initialization, forward passes, attention introspection, and certificate
//! state gradients.

mod forward;
mod params;

pub use forward::{
    attention_weights, bind_core, certificate_state_gradients, certificate_values, core_forward,
    core_on_tape, edge_batch, mlp_on_tape, policy_controls, policy_on_tape, BoundCore, BoundMlp,
    CertificateGradients, EdgeBatch,
};
pub use params::{edge_input_dim, init_params, GnnCore, GnnParams, Layer, Mlp, FEATURE_DIM};
