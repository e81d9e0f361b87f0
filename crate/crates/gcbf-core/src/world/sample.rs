//! Scenario sampling: uniform starts, goals, and obstacles with rejection
//! resampling for separation and clearance.

use rand::Rng;

use crate::dynamics::EnvKind;
use crate::numerics::RngState;

use super::graph::distance;
use super::{Obstacle, World, WorldError};

/// Sampling parameters; radii and ray counts default per workspace
/// dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioParams {
    pub env: EnvKind,
    pub n_agents: usize,
    pub area_width: f64,
    pub n_obstacles: usize,
    pub sensing_radius: f64,
    pub agent_radius: f64,
    pub n_rays: usize,
    /// Total rejection draws before giving up.
    pub rejection_budget: usize,
}

impl ScenarioParams {
    pub fn new(env: EnvKind, n_agents: usize, area_width: f64, n_obstacles: usize) -> Self {
        Self {
            env,
            n_agents,
            area_width,
            n_obstacles,
            sensing_radius: super::DEFAULT_SENSING_RADIUS,
            agent_radius: super::DEFAULT_AGENT_RADIUS,
            n_rays: if env.pos_dim() == 2 { super::DEFAULT_RAYS_2D } else { super::DEFAULT_RAYS_3D },
            rejection_budget: 10_000,
        }
    }
}

/// Sample a world: obstacle centers uniform in `[0, l]^n`, then agent starts
/// and goals uniform with rejection until starts are pairwise `> 4r` apart,
/// goals pairwise `> 4r` apart, and both clear obstacles by `> 2r`.
/// Non-position state entries start at zero.
pub fn sample_scenario(params: &ScenarioParams, rng: RngState) -> Result<World, WorldError> {
    let dim = params.env.pos_dim();
    let l = params.area_width;
    let mut gen = rng.rng();
    let mut draws = 0usize;

    let obstacles: Vec<Obstacle> = (0..params.n_obstacles)
        .map(|_| {
            if dim == 2 {
                let center = [gen.random_range(0.0..l), gen.random_range(0.0..l)];
                let sides = [gen.random_range(0.1..0.5), gen.random_range(0.1..0.5)];
                Obstacle::Rect { center, sides }
            } else {
                let center = [
                    gen.random_range(0.0..l),
                    gen.random_range(0.0..l),
                    gen.random_range(0.0..l),
                ];
                Obstacle::Sphere { center, radius: gen.random_range(0.15..0.3) }
            }
        })
        .collect();

    let min_sep = 4.0 * params.agent_radius;
    let clearance = 2.0 * params.agent_radius;
    let mut place = |placed: &[Vec<f64>], draws: &mut usize| -> Result<Vec<f64>, WorldError> {
        loop {
            *draws += 1;
            if *draws > params.rejection_budget {
                return Err(WorldError::RejectionBudget {
                    attempts: *draws - 1,
                    density: params.n_agents as f64 / l.powi(dim as i32),
                });
            }
            let p: Vec<f64> = (0..dim).map(|_| gen.random_range(0.0..l)).collect();
            let separated = placed.iter().all(|q| distance(q, &p) > min_sep);
            let clear = obstacles.iter().all(|o| o.signed_distance(&p) > clearance);
            if separated && clear {
                return Ok(p);
            }
        }
    };

    let mut starts: Vec<Vec<f64>> = Vec::with_capacity(params.n_agents);
    for _ in 0..params.n_agents {
        let p = place(&starts, &mut draws)?;
        starts.push(p);
    }
    let mut goals: Vec<Vec<f64>> = Vec::with_capacity(params.n_agents);
    for _ in 0..params.n_agents {
        let p = place(&goals, &mut draws)?;
        goals.push(p);
    }

    let state_dim = params.env.state_dim();
    let states = starts
        .into_iter()
        .map(|p| {
            let mut x = vec![0.0; state_dim];
            x[..dim].copy_from_slice(&p);
            x
        })
        .collect();

    let world = World {
        env: params.env,
        states,
        goals,
        obstacles,
        area_width: l,
        sensing_radius: params.sensing_radius,
        agent_radius: params.agent_radius,
        n_rays: params.n_rays,
        time_index: 0,
    };
    world.validate()?;
    Ok(world)
}
