//! Scene-graph construction and neighbor-set logic.
//!
//! Nodes are agents, per-agent goals, and LiDAR hit points; directed edges
//! flow from sender nodes to receiver agents. Inter-agent edges exist for
//! pairs strictly within the sensing radius, every agent receives its own
//! goal, and every LiDAR hit feeds the observing agent. Edge features are
//! relative encodings `e(x_j) - e(x_i)` in the environment's feature map.

use std::collections::BTreeMap;
use std::sync::{Mutex, OnceLock};

use crate::dynamics::Env;

use super::lidar::LidarHit;
use super::World;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Agent,
    Goal,
    LidarHit,
}

impl NodeKind {
    /// One-hot node feature, dimension 3.
    pub fn one_hot(self) -> [f64; 3] {
        match self {
            NodeKind::Agent => [1.0, 0.0, 0.0],
            NodeKind::Goal => [0.0, 1.0, 0.0],
            NodeKind::LidarHit => [0.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone)]
pub struct GraphNode {
    pub kind: NodeKind,
    /// Full state for agents; zero-padded position for goals and hits.
    pub state: Vec<f64>,
    /// Owning agent for goals and hits.
    pub owner: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct GraphEdge {
    /// Receiver agent index (also its node index).
    pub receiver: usize,
    /// Sender node index.
    pub sender: usize,
    /// Relative feature `e(x_sender) - e(x_receiver)`.
    pub feature: Vec<f64>,
}

/// Immutable graph snapshot of a world.
#[derive(Debug, Clone)]
pub struct SceneGraph {
    pub nodes: Vec<GraphNode>,
    /// Sorted by (receiver, sender); each receiver's edges are contiguous.
    pub edges: Vec<GraphEdge>,
    /// `edges[offsets[i]..offsets[i+1]]` are agent i's incoming edges.
    offsets: Vec<usize>,
    pub n_agents: usize,
}

impl SceneGraph {
    pub fn incoming(&self, agent: usize) -> &[GraphEdge] {
        &self.edges[self.offsets[agent]..self.offsets[agent + 1]]
    }

    pub fn edge_range(&self, agent: usize) -> std::ops::Range<usize> {
        self.offsets[agent]..self.offsets[agent + 1]
    }

    /// Agent-to-agent sender indices for a receiver.
    pub fn agent_senders(&self, agent: usize) -> Vec<usize> {
        self.incoming(agent)
            .iter()
            .filter(|e| self.nodes[e.sender].kind == NodeKind::Agent)
            .map(|e| e.sender)
            .collect()
    }
}

/// Build the scene graph for `world`, given the per-agent LiDAR scan.
pub fn build_graph(env: &Env, world: &World, scan: &[Vec<LidarHit>]) -> SceneGraph {
    let n = world.n_agents();
    let state_dim = env.kind.state_dim();
    let mut nodes: Vec<GraphNode> = Vec::with_capacity(2 * n + scan.iter().map(Vec::len).sum::<usize>());

    for x in &world.states {
        nodes.push(GraphNode { kind: NodeKind::Agent, state: x.clone(), owner: None });
    }
    for (i, goal) in world.goals.iter().enumerate() {
        let mut state = vec![0.0; state_dim];
        state[..goal.len()].copy_from_slice(goal);
        nodes.push(GraphNode { kind: NodeKind::Goal, state, owner: Some(i) });
    }
    let mut hit_nodes: Vec<usize> = Vec::new();
    for (i, hits) in scan.iter().enumerate() {
        for hit in hits {
            hit_nodes.push(nodes.len());
            nodes.push(GraphNode {
                kind: NodeKind::LidarHit,
                state: hit.padded_state(state_dim),
                owner: Some(i),
            });
        }
    }

    let features: Vec<Vec<f64>> = nodes.iter().map(|nd| env.feature_map(&nd.state)).collect();
    let mut edges = Vec::new();
    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0);
    for i in 0..n {
        let pi = world.position(i);
        // Sender node indices in ascending order: agents, own goal, own hits.
        let mut senders: Vec<usize> = Vec::new();
        for j in 0..n {
            if j != i && distance(pi, world.position(j)) < world.sensing_radius {
                senders.push(j);
            }
        }
        senders.push(n + i);
        for &hn in &hit_nodes {
            if nodes[hn].owner == Some(i) {
                senders.push(hn);
            }
        }
        for sender in senders {
            let feature = features[sender]
                .iter()
                .zip(&features[i])
                .map(|(s, r)| s - r)
                .collect();
            edges.push(GraphEdge { receiver: i, sender, feature });
        }
        offsets.push(edges.len());
    }

    SceneGraph { nodes, edges, offsets, n_agents: n }
}

/// The neighborhood sets used by the safety analysis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSet {
    /// All sender nodes within the sensing radius (agents and own hits).
    pub within_radius: Vec<usize>,
    /// Agent i itself plus the `M - 1` closest senders, ties to the smaller
    /// node index.
    pub selected: Vec<usize>,
}

/// The `M`-closest neighbor selection for agent `i` over agent senders and
/// the agent's own LiDAR hits. Goal nodes are conditioning inputs for the
/// learned networks, not part of the sensing neighborhood, so they are
/// excluded here.
pub fn m_closest(env: &Env, world: &World, scan: &[Vec<LidarHit>], i: usize, m: usize) -> NeighborSet {
    assert!(m >= 1);
    let n = world.n_agents();
    let pi = world.position(i);
    let mut candidates: Vec<(f64, usize)> = Vec::new();
    for j in 0..n {
        if j != i {
            let d = distance(pi, world.position(j));
            if d < world.sensing_radius {
                candidates.push((d, j));
            }
        }
    }
    // Hit nodes come after agents and goals in graph indexing.
    let mut hit_index = 2 * n;
    for (owner, hits) in scan.iter().enumerate() {
        for hit in hits {
            if owner == i {
                candidates.push((hit.distance, hit_index));
            }
            hit_index += 1;
        }
    }
    debug_assert_eq!(env.kind.pos_dim(), pi.len());
    candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));

    let within_radius: Vec<usize> = candidates.iter().map(|&(_, idx)| idx).collect();
    let mut selected = vec![i];
    selected.extend(candidates.iter().take(m - 1).map(|&(_, idx)| idx));
    NeighborSet { within_radius, selected }
}

/// Default `M` for a sensing radius and agent radius: one more than the
/// number of points a greedy packing places inside the sensing ball with
/// pairwise (and center) separation of `2 r`.
pub fn default_m(sensing_radius: f64, agent_radius: f64, pos_dim: usize) -> usize {
    static CACHE: OnceLock<Mutex<BTreeMap<(u64, u64, usize), usize>>> = OnceLock::new();
    let key = (sensing_radius.to_bits(), agent_radius.to_bits(), pos_dim);
    let cache = CACHE.get_or_init(|| Mutex::new(BTreeMap::new()));
    if let Some(&m) = cache.lock().unwrap().get(&key) {
        return m;
    }
    let m = greedy_packing_count(sensing_radius, agent_radius, pos_dim) + 1;
    cache.lock().unwrap().insert(key, m);
    m
}

fn greedy_packing_count(big_r: f64, r: f64, pos_dim: usize) -> usize {
    let sep = 2.0 * r;
    let step = r * 0.5;
    let cells = (2.0 * big_r / step).ceil() as i64 + 1;
    let mut accepted: Vec<Vec<f64>> = Vec::new();
    let mut scan = |point: Vec<f64>| {
        let to_center: f64 = point.iter().map(|v| v * v).sum::<f64>().sqrt();
        if to_center > big_r || to_center < sep {
            return;
        }
        let ok = accepted
            .iter()
            .all(|a| distance(a, &point) >= sep);
        if ok {
            accepted.push(point);
        }
    };
    if pos_dim == 2 {
        for ix in 0..cells {
            for iy in 0..cells {
                scan(vec![-big_r + ix as f64 * step, -big_r + iy as f64 * step]);
            }
        }
    } else {
        for ix in 0..cells {
            for iy in 0..cells {
                for iz in 0..cells {
                    scan(vec![
                        -big_r + ix as f64 * step,
                        -big_r + iy as f64 * step,
                        -big_r + iz as f64 * step,
                    ]);
                }
            }
        }
    }
    accepted.len()
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
