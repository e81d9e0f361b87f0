//! LiDAR simulation: evenly spaced ray directions and nearest-surface
//! intersections against the obstacle set.

use super::Obstacle;

/// One LiDAR return.
#[derive(Debug, Clone, PartialEq)]
pub struct LidarHit {
    /// Agent that owns the ray.
    pub owner: usize,
    /// Hit position in the workspace (pos_dim entries).
    pub point: Vec<f64>,
    /// Distance from the ray origin.
    pub distance: f64,
}

impl LidarHit {
    /// Hit position embedded in state space: position first, zeros after.
    pub fn padded_state(&self, state_dim: usize) -> Vec<f64> {
        let mut x = vec![0.0; state_dim];
        x[..self.point.len()].copy_from_slice(&self.point);
        x
    }
}

/// Evenly spaced planar directions, angle `2 pi k / n`.
pub fn ray_directions_2d(n_rays: usize) -> Vec<[f64; 3]> {
    (0..n_rays)
        .map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / n_rays as f64;
            [a.cos(), a.sin(), 0.0]
        })
        .collect()
}

/// Fibonacci-sphere lattice: deterministic, near-uniform directions in 3D.
pub fn ray_directions_3d(n_rays: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
    (0..n_rays)
        .map(|k| {
            let z = 1.0 - 2.0 * (k as f64 + 0.5) / n_rays as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let a = golden * k as f64;
            [r * a.cos(), r * a.sin(), z]
        })
        .collect()
}

/// Cast `n_rays` rays from `origin` and keep the nearest surface hit of each
/// ray when it lies strictly within `range`. Rays that hit nothing in range
/// produce no entry.
pub fn cast_lidar(
    owner: usize,
    origin: &[f64],
    obstacles: &[Obstacle],
    n_rays: usize,
    range: f64,
    pos_dim: usize,
) -> Vec<LidarHit> {
    if n_rays == 0 || obstacles.is_empty() {
        return Vec::new();
    }
    let dirs = if pos_dim == 2 { ray_directions_2d(n_rays) } else { ray_directions_3d(n_rays) };
    let mut hits = Vec::new();
    for dir in &dirs {
        let mut nearest = f64::INFINITY;
        for obstacle in obstacles {
            if let Some(t) = ray_obstacle(origin, dir, obstacle) {
                if t < nearest {
                    nearest = t;
                }
            }
        }
        if nearest > 0.0 && nearest < range {
            let point = (0..pos_dim).map(|a| origin[a] + nearest * dir[a]).collect();
            hits.push(LidarHit { owner, point, distance: nearest });
        }
    }
    hits
}

fn ray_obstacle(origin: &[f64], dir: &[f64; 3], obstacle: &Obstacle) -> Option<f64> {
    match obstacle {
        Obstacle::Rect { center, sides } => ray_aabb_2d(origin, dir, center, sides),
        Obstacle::Sphere { center, radius } => ray_sphere(origin, dir, center, *radius),
    }
}

/// Slab test against an axis-aligned rectangle; returns the smallest
/// positive parameter along the ray.
fn ray_aabb_2d(origin: &[f64], dir: &[f64; 3], center: &[f64; 2], sides: &[f64; 2]) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for a in 0..2 {
        let half = sides[a] * 0.5;
        let (lo, hi) = (center[a] - half, center[a] + half);
        if dir[a].abs() < 1e-15 {
            if origin[a] < lo || origin[a] > hi {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut t0, mut t1) = ((lo - origin[a]) * inv, (hi - origin[a]) * inv);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    if t_far < 0.0 {
        return None;
    }
    Some(if t_near > 0.0 { t_near } else { t_far })
}

fn ray_sphere(origin: &[f64], dir: &[f64; 3], center: &[f64; 3], radius: f64) -> Option<f64> {
    let oc: Vec<f64> = (0..3).map(|a| origin.get(a).copied().unwrap_or(0.0) - center[a]).collect();
    let b = oc.iter().zip(dir).map(|(o, d)| o * d).sum::<f64>();
    let c = oc.iter().map(|o| o * o).sum::<f64>() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = -b - sq;
    let t1 = -b + sq;
    if t0 > 0.0 {
        Some(t0)
    } else if t1 > 0.0 {
        Some(t1)
    } else {
        None
    }
}
