//! Scripted expert and synthetic preference annotator.
//!
//! The expert looks one step ahead with the noise-free simulator: it proposes
//! moves for the worst-matched parts of the state and keeps the one that
//! lowers EMD the most. Rankings score candidates by their post-step EMD.

use serde::{Deserialize, Serialize};

use crate::envs::{emd, farthest_point_sample, Env, EnvState, EMD_POINTS};
use crate::error::Result;
use crate::policy::{ActionKind, ActionPrimitive};
use crate::rng::Rng;

/// EMD increase beyond which a candidate is too poor to rank.
pub const UNRANKABLE_WORSENING: f64 = 0.005;
/// Maximum endpoint jitter of auxiliary actions.
pub const AUX_JITTER: f64 = 0.03;
/// Minimum normalized distance between auxiliary actions.
pub const AUX_MIN_SEPARATION: f64 = 0.01;
const PROPOSALS: usize = 8;
const AUX_PROPOSALS: usize = 16;
const CLUSTER_RADIUS: f64 = 0.05;

/// Annotation of one state's candidates: ordered rankable indices (best
/// first), unrankable indices and the annotated optimal action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRanking {
    pub ordering: Vec<usize>,
    pub unrankable: Vec<usize>,
    pub optimal_action: ActionPrimitive,
}

impl OracleRanking {
    /// Checks that `ordering` and `unrankable` partition `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.ordering.iter().chain(&self.unrankable) {
            if i >= n {
                return Err(crate::PamError::invariant(format!(
                    "candidate index {i} out of range for {n} candidates"
                )));
            }
            if seen[i] {
                return Err(crate::PamError::invariant(format!(
                    "candidate index {i} appears more than once"
                )));
            }
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(crate::PamError::invariant(format!(
                "candidate index {i} is neither rankable nor unrankable"
            )));
        }
        self.optimal_action.validate()
    }
}

fn clamp01(p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

/// EMD after the noise-free transition.
pub fn post_step_emd(env: &Env, state: &EnvState, action: &ActionPrimitive) -> Result<f64> {
    Ok(env.emd(&env.step(state, action, None)?))
}

/// Candidate moves for the worst-matched parts of the state, worst first.
fn proposals(env: &Env, state: &EnvState, count: usize) -> Vec<ActionPrimitive> {
    match state {
        EnvState::Granular(g) => {
            let pts = farthest_point_sample(&g.grains, EMD_POINTS);
            let (assign, d) = emd::match_points(&pts, &env.target.points);
            let mut order: Vec<usize> = (0..pts.len()).collect();
            order.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
            order
                .into_iter()
                .take(count)
                .map(|i| {
                    let seed = pts[i];
                    let members: Vec<&[f64; 2]> = g
                        .grains
                        .iter()
                        .filter(|p| emd::dist(**p, seed) <= CLUSTER_RADIUS)
                        .collect();
                    let m = members.len().max(1) as f64;
                    let c = [
                        members.iter().map(|p| p[0]).sum::<f64>() / m,
                        members.iter().map(|p| p[1]).sum::<f64>() / m,
                    ];
                    let goal = env.target.points[assign[i]];
                    let dir = [goal[0] - c[0], goal[1] - c[1]];
                    let len = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt().max(1e-9);
                    let back = CLUSTER_RADIUS + 0.01;
                    let start = clamp01([c[0] - back * dir[0] / len, c[1] - back * dir[1] / len]);
                    ActionPrimitive::new(ActionKind::Sweep, start, goal)
                })
                .collect()
        }
        EnvState::Rope(r) => {
            let (assign, d) = emd::match_points(&r.nodes, &env.target.rope_nodes);
            let mut order: Vec<usize> = (0..r.nodes.len()).collect();
            order.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
            order
                .into_iter()
                .take(count)
                .map(|i| ActionPrimitive::new(ActionKind::PickPlace, r.nodes[i], env.target.rope_nodes[assign[i]]))
                .collect()
        }
    }
}

/// The scripted expert's optimal action `a0` for `state`.
///
/// A rope moves its most displaced node onto the matched circle point when
/// that lowers the noise-free post-step EMD. Otherwise, and always for
/// granular states, the proposal with the lowest post-step EMD wins. With no
/// improving proposal a rope keeps the plain rule and a granular state gets
/// an in-place sweep away from every grain.
pub fn expert_action(env: &Env, state: &EnvState) -> Result<ActionPrimitive> {
    let before = env.emd(state);
    let candidates = proposals(env, state, PROPOSALS);
    if let (EnvState::Rope(_), Some(rule)) = (state, candidates.first()) {
        if post_step_emd(env, state, rule)? < before {
            return Ok(*rule);
        }
    }
    let mut best: Option<(f64, ActionPrimitive)> = None;
    for a in &candidates {
        let e = post_step_emd(env, state, a)?;
        if best.as_ref().is_none_or(|(be, _)| e < *be) {
            best = Some((e, *a));
        }
    }
    Ok(match (best, state) {
        (Some((e, a)), _) if e < before => a,
        (_, EnvState::Granular(g)) => {
            let p = idle_point(&g.grains);
            ActionPrimitive::new(ActionKind::Sweep, p, p)
        }
        (_, EnvState::Rope(r)) => candidates
            .first()
            .copied()
            .unwrap_or_else(|| ActionPrimitive::new(ActionKind::PickPlace, r.nodes[0], r.nodes[0])),
    })
}

/// Workspace corner farthest from every grain.
fn idle_point(grains: &[[f64; 2]]) -> [f64; 2] {
    let clearance = |c: [f64; 2]| {
        grains
            .iter()
            .map(|p| emd::dist(*p, c))
            .fold(f64::INFINITY, f64::min)
    };
    let mut best = ([0.0, 0.0], -1.0);
    for c in [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]] {
        let d = clearance(c);
        if d > best.1 {
            best = (c, d);
        }
    }
    best.0
}

fn jitter(p: [f64; 2], rng: &mut Rng) -> [f64; 2] {
    let r = AUX_JITTER * rng.uniform().sqrt();
    let th = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);
    clamp01([p[0] + r * th.cos(), p[1] + r * th.sin()])
}

/// `k` distinct near-optimal alternatives to the expert action.
///
/// Candidates rotate through the improving proposals with jittered endpoints;
/// each kept action lowers EMD on the noise-free step and sits at least
/// `AUX_MIN_SEPARATION` (normalized) from the expert action and every other
/// kept action. If too few improving variants exist, the remainder is filled
/// with distinct non-improving variants.
pub fn aux_actions(env: &Env, state: &EnvState, k: usize, rng: &mut Rng) -> Result<Vec<ActionPrimitive>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let before = env.emd(state);
    let optimal = expert_action(env, state)?;
    let mut base = Vec::new();
    for a in proposals(env, state, AUX_PROPOSALS) {
        if post_step_emd(env, state, &a)? < before {
            base.push(a);
        }
    }
    if base.is_empty() {
        base.push(optimal);
    }
    let distinct = |a: &ActionPrimitive, kept: &[ActionPrimitive]| {
        a.normalized_distance(&optimal) >= AUX_MIN_SEPARATION
            && kept.iter().all(|b| a.normalized_distance(b) >= AUX_MIN_SEPARATION)
    };
    let mut kept = Vec::with_capacity(k);
    let mut fallback = Vec::new();
    let max_attempts = 30 * k;
    for attempt in 0..max_attempts {
        if kept.len() == k {
            break;
        }
        let b = base[attempt % base.len()];
        let a = ActionPrimitive::new(b.kind, jitter(b.start(), rng), jitter(b.end(), rng));
        if !distinct(&a, &kept) {
            continue;
        }
        if post_step_emd(env, state, &a)? < before {
            kept.push(a);
        } else if fallback.len() < k {
            fallback.push(a);
        }
    }
    for a in fallback {
        if kept.len() == k {
            break;
        }
        if distinct(&a, &kept) {
            kept.push(a);
        }
    }
    while kept.len() < k {
        let b = base[kept.len() % base.len()];
        kept.push(ActionPrimitive::new(b.kind, jitter(b.start(), rng), jitter(b.end(), rng)));
    }
    Ok(kept)
}

/// Group-then-sort annotation of `candidates` by their post-step EMD.
pub fn oracle_rank(env: &Env, state: &EnvState, candidates: &[ActionPrimitive]) -> Result<(OracleRanking, Vec<f64>)> {
    let before = env.emd(state);
    let scores = candidates
        .iter()
        .map(|a| post_step_emd(env, state, a))
        .collect::<Result<Vec<f64>>>()?;
    let (mut rankable, unrankable): (Vec<usize>, Vec<usize>) =
        (0..candidates.len()).partition(|&i| scores[i] - before <= UNRANKABLE_WORSENING);
    rankable.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    Ok((
        OracleRanking {
            ordering: rankable,
            unrankable,
            optimal_action: expert_action(env, state)?,
        },
        scores,
    ))
}
