//! On-policy data collection and control-invariance labeling.

use rand::seq::SliceRandom;

use crate::dynamics::Env;
use crate::gnn::{edge_batch, policy_controls, GnnParams};
use crate::numerics::RngState;
use crate::world::{
    safety_status_with_scan, sample_scenario, ScenarioParams, World, WorldError,
};

/// One recorded step of a rollout.
#[derive(Debug, Clone)]
pub struct Transition {
    pub world: World,
    /// Controls applied under the parameters that collected the rollout.
    pub controls: Vec<Vec<f64>>,
    pub next_world: World,
    pub dt: f64,
    /// Provenance: which scenario and which step within it.
    pub scenario: u64,
    pub step_index: usize,
    /// Control targets for the policy loss, fixed at collection time.
    pub control_targets: Option<Vec<Vec<f64>>>,
}

/// Per-agent label of a transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    /// In the safe set now and for the whole labeling horizon.
    ControlInvariant,
    /// Violating the safety predicate now.
    Unsafe,
    Unlabeled,
}

/// Transitions plus per-agent labels.
#[derive(Debug, Clone, Default)]
pub struct LabeledDataset {
    pub transitions: Vec<Transition>,
    /// `labels[t][i]` for transition `t`, agent `i`.
    pub labels: Vec<Vec<Label>>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().flatten().filter(|&&l| l == label).count()
    }
}

/// Advance a world one step under the learned policy; returns the applied
/// controls and the stepped world.
pub fn step_world_with_policy(
    env: &Env,
    params: &GnnParams,
    world: &World,
    dt: f64,
) -> Result<(Vec<Vec<f64>>, World), WorldError> {
    let graph = world.graph(env);
    let batch = edge_batch(&graph);
    let u_nom: Vec<Vec<f64>> = (0..world.n_agents())
        .map(|i| env.nominal(&world.states[i], &world.goals[i]))
        .collect();
    let controls = policy_controls(env, &params.policy, &batch, &u_nom);
    let mut next = world.clone();
    for (x, u) in next.states.iter_mut().zip(&controls) {
        *x = env.step(x, u, dt)?;
    }
    next.time_index += 1;
    Ok((controls, next))
}

/// Collect on-policy rollouts from freshly sampled scenarios.
///
/// Produces `n_scenarios * rollout_len` transitions; scenario ids and step
/// indices are recorded so labeling can share trajectory suffixes.
pub fn collect_onpolicy(
    env: &Env,
    params: &GnnParams,
    scenario: &ScenarioParams,
    n_scenarios: usize,
    rollout_len: usize,
    dt: f64,
    rng: RngState,
) -> Result<Vec<Transition>, WorldError> {
    let mut transitions = Vec::with_capacity(n_scenarios * rollout_len);
    for s in 0..n_scenarios {
        let world0 = sample_scenario(scenario, rng.split(s as u64))?;
        let mut world = world0;
        for k in 0..rollout_len {
            let (controls, next) = step_world_with_policy(env, params, &world, dt)?;
            transitions.push(Transition {
                world,
                controls,
                next_world: next.clone(),
                dt,
                scenario: rng.split(s as u64).stream(),
                step_index: k,
                control_targets: None,
            });
            world = next;
        }
    }
    Ok(transitions)
}

/// Label every transition: an agent violating the safety predicate now is
/// unsafe; an agent that stays safe for `horizon` further steps under the
/// given policy is control-invariant; anything else is left unlabeled.
///
/// Transitions from the same scenario share their future: the scenario is
/// re-simulated once and each transition reads its window, falling back to
/// an independent roll when the stored trajectory does not match the given
/// parameters.
pub fn label_invariance(
    env: &Env,
    params: &GnnParams,
    buffer: &[Transition],
    horizon: usize,
) -> Result<LabeledDataset, WorldError> {
    assert!(horizon >= 1);
    // Group indices by scenario, ordered by step index.
    let mut order: Vec<usize> = (0..buffer.len()).collect();
    order.sort_by_key(|&t| (buffer[t].scenario, buffer[t].step_index));

    let mut labels: Vec<Vec<Label>> = buffer
        .iter()
        .map(|t| vec![Label::Unlabeled; t.world.n_agents()])
        .collect();

    let mut g = 0;
    while g < order.len() {
        let scenario = buffer[order[g]].scenario;
        let mut end = g;
        while end < order.len() && buffer[order[end]].scenario == scenario {
            end += 1;
        }
        let group = &order[g..end];
        label_group(env, params, buffer, group, horizon, &mut labels)?;
        g = end;
    }

    Ok(LabeledDataset { transitions: buffer.to_vec(), labels })
}

fn label_group(
    env: &Env,
    params: &GnnParams,
    buffer: &[Transition],
    group: &[usize],
    horizon: usize,
    labels: &mut [Vec<Label>],
) -> Result<(), WorldError> {
    let first = &buffer[group[0]];
    let base_step = first.step_index;
    let last_step = buffer[*group.last().unwrap()].step_index;
    let contiguous = group
        .iter()
        .enumerate()
        .all(|(k, &t)| buffer[t].step_index == base_step + k);

    if contiguous {
        // Shared trajectory: simulate once, verify, read windows.
        let total = last_step - base_step + horizon;
        let mut worlds = Vec::with_capacity(total + 1);
        worlds.push(first.world.clone());
        let mut world = first.world.clone();
        let mut consistent = true;
        for k in 0..total {
            let (_, next) = step_world_with_policy(env, params, &world, first.dt)?;
            // The stored trajectory must be the one this policy generates.
            if let Some(&t) = group.get(k + 1) {
                if buffer[t].world.states != next.states {
                    consistent = false;
                    break;
                }
            }
            worlds.push(next.clone());
            world = next;
        }
        if consistent {
            let safety: Vec<Vec<bool>> = worlds
                .iter()
                .map(|w| {
                    let scan = w.lidar_scan();
                    safety_status_with_scan(w, &scan)
                })
                .collect();
            for (k, &t) in group.iter().enumerate() {
                let n = buffer[t].world.n_agents();
                for i in 0..n {
                    labels[t][i] = if !safety[k][i] {
                        Label::Unsafe
                    } else if (k..=k + horizon).all(|s| safety[s][i]) {
                        Label::ControlInvariant
                    } else {
                        Label::Unlabeled
                    };
                }
            }
            return Ok(());
        }
    }

    for &t in group {
        labels[t] = label_one(env, params, &buffer[t], horizon)?;
    }
    Ok(())
}

/// Independent labeling of one transition by rolling `horizon` steps.
pub fn label_one(
    env: &Env,
    params: &GnnParams,
    transition: &Transition,
    horizon: usize,
) -> Result<Vec<Label>, WorldError> {
    let n = transition.world.n_agents();
    let scan = transition.world.lidar_scan();
    let now_safe = safety_status_with_scan(&transition.world, &scan);
    let mut invariant = now_safe.clone();
    let mut world = transition.world.clone();
    for _ in 0..horizon {
        let (_, next) = step_world_with_policy(env, params, &world, transition.dt)?;
        let scan = next.lidar_scan();
        let safe = safety_status_with_scan(&next, &scan);
        for (inv, s) in invariant.iter_mut().zip(&safe) {
            *inv = *inv && *s;
        }
        world = next;
    }
    Ok((0..n)
        .map(|i| {
            if !now_safe[i] {
                Label::Unsafe
            } else if invariant[i] {
                Label::ControlInvariant
            } else {
                Label::Unlabeled
            }
        })
        .collect())
}

/// Deterministically sample a batch of transition indices without
/// replacement.
pub fn sample_batch(n_total: usize, batch_size: usize, rng: RngState) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..n_total).collect();
    let mut gen = rng.rng();
    indices.shuffle(&mut gen);
    indices.truncate(batch_size.min(n_total));
    indices
}
