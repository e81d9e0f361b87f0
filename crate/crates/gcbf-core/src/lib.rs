//! Core library for learning and auditing graph control barrier functions
//! (GCBF+) for distributed multi-agent collision avoidance.
//!
//! The crate is organized around the pipeline:
//!
//! - [`numerics`]: tensors, tape autodiff, Adam, seeded RNG.
//! - [`dynamics`]: the five agent models, control limits, Euler stepping,
//!   and nominal goal-reaching controllers.
//! - [`world`]: world state, LiDAR simulation, scene-graph construction,
//!   neighbor sets, scenario sampling, and safety predicates.
//! - [`gnn`]: the GNN certificate `h` and distributed policy, with attention
//!   aggregation and introspection.
//! - [`qp`]: dense convex QP solving, the centralized QP training target,
//!   and hand-crafted CBF-QP baselines.
//! - [`trainer`]: on-policy data collection, control-invariance labeling,
//!   the loss, and the training loop.
//! - [`eval`]: safety/reach/success metrics, scaling and sensitivity
//!   experiments, and the certificate audit harness.
//! - [`io`]: configuration, checkpoints, metrics files, and logs.

pub mod dynamics;
pub mod gnn;
pub mod numerics;
pub mod qp;
pub mod trainer;
pub mod world;

pub use dynamics::{Env, EnvKind};
pub use numerics::{RngState, Tensor};
pub use world::World;
