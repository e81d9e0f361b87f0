//! World state, obstacles, LiDAR scanning, graph construction, scenario
//! sampling, and the per-agent safety predicate.

mod graph;
mod lidar;
mod sample;

pub use graph::{
    build_graph, default_m, m_closest, GraphEdge, GraphNode, NeighborSet, NodeKind, SceneGraph,
};
pub use lidar::{cast_lidar, ray_directions_2d, ray_directions_3d, LidarHit};
pub use sample::{sample_scenario, ScenarioParams};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DynamicsError, Env, EnvKind};

pub(crate) use graph::distance;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid world: {0}")]
    Invalid(String),
    #[error(
        "scenario rejection budget exhausted after {attempts} draws \
         (agent density {density:.3} per unit volume)"
    )]
    RejectionBudget { attempts: usize, density: f64 },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// A static obstacle: axis-aligned rectangle in 2D, sphere in 3D.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Obstacle {
    Rect { center: [f64; 2], sides: [f64; 2] },
    Sphere { center: [f64; 3], radius: f64 },
}

impl Obstacle {
    /// Signed distance from a point to the obstacle surface (negative
    /// inside).
    pub fn signed_distance(&self, p: &[f64]) -> f64 {
        match self {
            Obstacle::Rect { center, sides } => {
                let dx = (p[0] - center[0]).abs() - sides[0] * 0.5;
                let dy = (p[1] - center[1]).abs() - sides[1] * 0.5;
                let outside = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
                outside + dx.max(dy).min(0.0)
            }
            Obstacle::Sphere { center, radius } => {
                let d: f64 = (0..3)
                    .map(|a| (p.get(a).copied().unwrap_or(0.0) - center[a]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                d - radius
            }
        }
    }
}

/// Full snapshot of the multi-agent system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub env: EnvKind,
    /// One state vector per agent.
    pub states: Vec<Vec<f64>>,
    /// One goal position per agent.
    pub goals: Vec<Vec<f64>>,
    pub obstacles: Vec<Obstacle>,
    /// Side length of the sampling square/cube.
    pub area_width: f64,
    /// Sensing radius R.
    pub sensing_radius: f64,
    /// Agent radius r.
    pub agent_radius: f64,
    pub n_rays: usize,
    pub time_index: u64,
}

/// Default sensing radius (m).
pub const DEFAULT_SENSING_RADIUS: f64 = 0.5;
/// Default agent radius (m).
pub const DEFAULT_AGENT_RADIUS: f64 = 0.05;
/// Default ray counts for 2D and 3D LiDAR.
pub const DEFAULT_RAYS_2D: usize = 32;
pub const DEFAULT_RAYS_3D: usize = 130;

impl World {
    pub fn n_agents(&self) -> usize {
        self.states.len()
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.states[i][..self.env.pos_dim()]
    }

    /// Check the structural invariants: `R > 2r > 0`, finite positions,
    /// matching dimensions.
    pub fn validate(&self) -> Result<(), WorldError> {
        if !(self.agent_radius > 0.0 && self.sensing_radius > 2.0 * self.agent_radius) {
            return Err(WorldError::Invalid(format!(
                "need R > 2r > 0, got R = {}, r = {}",
                self.sensing_radius, self.agent_radius
            )));
        }
        if self.goals.len() != self.states.len() {
            return Err(WorldError::Invalid(format!(
                "{} states but {} goals",
                self.states.len(),
                self.goals.len()
            )));
        }
        let n = self.env.state_dim();
        let nn = self.env.pos_dim();
        for (i, x) in self.states.iter().enumerate() {
            if x.len() != n {
                return Err(WorldError::Invalid(format!("agent {i} state dim {}", x.len())));
            }
            if !x.iter().all(|v| v.is_finite()) {
                return Err(WorldError::Invalid(format!("agent {i} state not finite")));
            }
        }
        for (i, g) in self.goals.iter().enumerate() {
            if g.len() != nn || !g.iter().all(|v| v.is_finite()) {
                return Err(WorldError::Invalid(format!("goal {i} invalid")));
            }
        }
        Ok(())
    }

    /// Cast the configured LiDAR rays for every agent.
    pub fn lidar_scan(&self) -> Vec<Vec<LidarHit>> {
        (0..self.n_agents())
            .map(|i| {
                cast_lidar(
                    i,
                    self.position(i),
                    &self.obstacles,
                    self.n_rays,
                    self.sensing_radius,
                    self.env.pos_dim(),
                )
            })
            .collect()
    }

    /// Convenience: scan and build the scene graph in one call.
    pub fn graph(&self, env: &Env) -> SceneGraph {
        let scan = self.lidar_scan();
        build_graph(env, self, &scan)
    }
}

/// Per-agent safety: agent `i` is safe when every other agent is strictly
/// farther than `2r` and every LiDAR return is strictly farther than `r`.
pub fn safety_status_with_scan(world: &World, scan: &[Vec<LidarHit>]) -> Vec<bool> {
    let n = world.n_agents();
    (0..n)
        .map(|i| {
            let pi = world.position(i);
            let agents_ok = (0..n)
                .filter(|&j| j != i)
                .all(|j| distance(pi, world.position(j)) > 2.0 * world.agent_radius);
            let obstacles_ok = scan[i].iter().all(|h| h.distance > world.agent_radius);
            agents_ok && obstacles_ok
        })
        .collect()
}

/// [`safety_status_with_scan`] with a fresh scan.
pub fn safety_status(world: &World) -> Vec<bool> {
    safety_status_with_scan(world, &world.lidar_scan())
}
