use serde::{Deserialize, Serialize};

use super::ROPE_NODES;
use crate::policy::ActionPrimitive;
use crate::rng::Rng;

/// Segments over which a dragged node's displacement decays by `1/e`.
pub const FOLLOW_DECAY: f64 = 3.0;
pub const RELAX_ITERATIONS: usize = 50;

/// Closed chain of nodes; node `R-1` links back to node `0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeState {
    pub nodes: Vec<[f64; 2]>,
    pub rest_length: f64,
}

impl RopeState {
    pub fn segment_lengths(&self) -> Vec<f64> {
        let n = self.nodes.len();
        (0..n)
            .map(|i| {
                let a = self.nodes[i];
                let b = self.nodes[(i + 1) % n];
                ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt()
            })
            .collect()
    }

    pub fn total_rest_length(&self) -> f64 {
        self.rest_length * self.nodes.len() as f64
    }

    pub fn nearest_node(&self, p: [f64; 2]) -> usize {
        let mut best = 0;
        let mut bd = f64::INFINITY;
        for (i, q) in self.nodes.iter().enumerate() {
            let d = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
            if d < bd {
                bd = d;
                best = i;
            }
        }
        best
    }

    /// Polyline resampled at `per_segment` points per segment.
    pub fn dense_points(&self, per_segment: usize) -> Vec<[f64; 2]> {
        dense_loop(&self.nodes, per_segment)
    }
}

/// Points interpolated along a closed polyline, `per_segment` per edge.
pub fn dense_loop(nodes: &[[f64; 2]], per_segment: usize) -> Vec<[f64; 2]> {
    let n = nodes.len();
    let mut out = Vec::with_capacity(n * per_segment);
    for i in 0..n {
        let a = nodes[i];
        let b = nodes[(i + 1) % n];
        for s in 0..per_segment {
            let f = s as f64 / per_segment as f64;
            out.push([a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]);
        }
    }
    out
}

fn clamp01(p: &mut [f64; 2]) {
    p[0] = p[0].clamp(0.0, 1.0);
    p[1] = p[1].clamp(0.0, 1.0);
}

/// Position-based length-constraint projection (Gauss-Seidel sweeps).
pub fn relax(nodes: &mut [[f64; 2]], rest: f64, pinned: Option<usize>, iterations: usize) {
    let n = nodes.len();
    for _ in 0..iterations {
        for i in 0..n {
            let j = (i + 1) % n;
            let d = [nodes[j][0] - nodes[i][0], nodes[j][1] - nodes[i][1]];
            let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
            if len < 1e-12 {
                continue;
            }
            let diff = (len - rest) / len;
            let (wi, wj) = match pinned {
                Some(p) if p == i => (0.0, 1.0),
                Some(p) if p == j => (1.0, 0.0),
                _ => (0.5, 0.5),
            };
            nodes[i][0] += wi * diff * d[0];
            nodes[i][1] += wi * diff * d[1];
            nodes[j][0] -= wj * diff * d[0];
            nodes[j][1] -= wj * diff * d[1];
        }
        for p in nodes.iter_mut() {
            clamp01(p);
        }
    }
}

/// Drags `nodes[idx]` by `delta`; neighbours follow with displacement
/// decaying as `exp(-k / FOLLOW_DECAY)` in loop distance `k`.
fn drag(nodes: &mut [[f64; 2]], idx: usize, delta: [f64; 2]) {
    let n = nodes.len();
    for (i, p) in nodes.iter_mut().enumerate() {
        let k = {
            let a = (i + n - idx) % n;
            a.min(n - a)
        };
        let w = (-(k as f64) / FOLLOW_DECAY).exp();
        p[0] += w * delta[0];
        p[1] += w * delta[1];
        clamp01(p);
    }
}

/// Pulls each node to within `rest` of its predecessor walking outward
/// from `idx` in both directions around the loop.
fn follow_the_leader(nodes: &mut [[f64; 2]], idx: usize, rest: f64) {
    let n = nodes.len();
    let half = n / 2;
    for dir in [1usize, n - 1] {
        let mut prev = idx;
        for k in 1..=half {
            let cur = (idx + dir * k) % n;
            let d = [nodes[cur][0] - nodes[prev][0], nodes[cur][1] - nodes[prev][1]];
            let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
            if len > rest {
                let s = rest / len;
                nodes[cur] = [nodes[prev][0] + s * d[0], nodes[prev][1] + s * d[1]];
            }
            prev = cur;
        }
    }
}

/// Pick the node nearest `p`, place it at `q`, relax with the placed node held.
pub fn pick_place(state: &RopeState, action: &ActionPrimitive) -> RopeState {
    let p = action.start();
    let q = action.end();
    let idx = state.nearest_node(p);
    let mut nodes = state.nodes.clone();
    let delta = [q[0] - nodes[idx][0], q[1] - nodes[idx][1]];
    drag(&mut nodes, idx, delta);
    nodes[idx] = q;
    follow_the_leader(&mut nodes, idx, state.rest_length);
    relax(&mut nodes, state.rest_length, Some(idx), RELAX_ITERATIONS);
    RopeState {
        nodes,
        rest_length: state.rest_length,
    }
}

/// Goal loop shifted and bent by a few random drags, relaxed to convergence.
pub fn reset(goal: &[[f64; 2]], rest_length: f64, rng: &mut Rng) -> RopeState {
    let shift = [rng.uniform_range(-0.15, 0.15), rng.uniform_range(-0.15, 0.15)];
    let mut nodes: Vec<[f64; 2]> = goal
        .iter()
        .map(|p| {
            let mut q = [p[0] + shift[0], p[1] + shift[1]];
            clamp01(&mut q);
            q
        })
        .collect();
    let drags = rng.int_inclusive(2, 4);
    for _ in 0..drags {
        let idx = rng.below(ROPE_NODES);
        let ang = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);
        let mag = rng.uniform_range(0.08, 0.25);
        drag(&mut nodes, idx, [mag * ang.cos(), mag * ang.sin()]);
        relax(&mut nodes, rest_length, Some(idx), RELAX_ITERATIONS);
    }
    relax(&mut nodes, rest_length, None, 2000);
    RopeState { nodes, rest_length }
}
