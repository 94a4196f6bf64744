//! Reward-guided selection among sampled candidate actions.

use serde::{Deserialize, Serialize};

use crate::diffusion::{q_jump, squared_errors, NoisePredictor, NoiseSchedule};
use crate::error::{PamError, Result};
use crate::nn::Tensor2;
use crate::policy::{broadcast_rows, ActionKind, ActionPrimitive, PointSet, PolicyNet, ACTION_DIM};
use crate::preference::RewardHead;
use crate::rng::Rng;

/// Monte-Carlo draws per candidate, shared by every candidate of a state.
pub const REWARD_DRAWS: usize = 16;
/// Fraction of the smallest timesteps the implicit reward samples from.
pub const LOW_STEP_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredAction {
    pub action: ActionPrimitive,
    pub reward: f64,
    pub source_index: usize,
}

/// Scores a batch of candidate actions for one observation.
pub trait RewardModel {
    fn score(&self, obs: &PointSet, candidates: &[ActionPrimitive], rng: &mut Rng) -> Result<Vec<f64>>;
}

impl<F> RewardModel for F
where
    F: Fn(&PointSet, &[ActionPrimitive]) -> Result<Vec<f64>>,
{
    fn score(&self, obs: &PointSet, candidates: &[ActionPrimitive], _rng: &mut Rng) -> Result<Vec<f64>> {
        self(obs, candidates)
    }
}

/// `r(a) = -beta T E_{t, eps} ( ||eps - eps_PL||^2 - ||eps - eps_SL||^2 )`
/// with `t` limited to the smallest timesteps.
pub struct ImplicitReward<'a> {
    pub schedule: &'a NoiseSchedule,
    pub finetune: &'a PolicyNet,
    pub reference: &'a PolicyNet,
    pub beta: f64,
    pub draws: usize,
}

impl<'a> ImplicitReward<'a> {
    pub fn new(schedule: &'a NoiseSchedule, finetune: &'a PolicyNet, reference: &'a PolicyNet, beta: f64) -> Result<Self> {
        if finetune.arch() != reference.arch() {
            return Err(PamError::config("finetuned and reference architectures differ"));
        }
        reference.check_schedule(schedule)?;
        if !(beta > 0.0) {
            return Err(PamError::config(format!("beta must be positive, got {beta}")));
        }
        Ok(Self {
            schedule,
            finetune,
            reference,
            beta,
            draws: REWARD_DRAWS,
        })
    }
}

/// Implicit rewards of `candidates` from predictors already conditioned on
/// the observation (one row per `(candidate, draw)`, candidate-major).
///
/// The same `draws` pairs `(t, eps)` are used for every candidate.
pub fn implicit_rewards_with(
    schedule: &NoiseSchedule,
    finetune: &impl NoisePredictor,
    reference: &impl NoisePredictor,
    candidates: &[ActionPrimitive],
    beta: f64,
    draws: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if draws == 0 {
        return Err(PamError::config("implicit reward needs at least one draw"));
    }
    let hi = schedule.low_step_cutoff(LOW_STEP_FRACTION);
    let shared: Vec<(usize, Vec<f64>)> = (0..draws)
        .map(|_| (rng.int_inclusive(1, hi), rng.normal_vec(ACTION_DIM)))
        .collect();
    let rows = candidates.len() * draws;
    let mut x_t = Tensor2::zeros(rows, ACTION_DIM);
    let mut noise = Tensor2::zeros(rows, ACTION_DIM);
    let mut t = Vec::with_capacity(rows);
    for (c, a) in candidates.iter().enumerate() {
        let x0 = a.normalized();
        for (s, (ts, eps)) in shared.iter().enumerate() {
            let r = c * draws + s;
            x_t.row_mut(r).copy_from_slice(&q_jump(schedule, &x0, *ts, eps)?);
            noise.row_mut(r).copy_from_slice(eps);
            t.push(*ts);
        }
    }
    let e_pl = squared_errors(&noise, &finetune.predict(&x_t, &t)?);
    let e_sl = squared_errors(&noise, &reference.predict(&x_t, &t)?);
    let scale = beta * schedule.steps() as f64;
    let rewards: Vec<f64> = (0..candidates.len())
        .map(|c| {
            let sum: f64 = (0..draws).map(|s| e_pl[c * draws + s] - e_sl[c * draws + s]).sum();
            // `+ 0.0` folds a negative zero into zero.
            -scale * (sum / draws as f64) + 0.0
        })
        .collect();
    if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(PamError::non_finite(format!("implicit reward of candidate {i}")));
    }
    Ok(rewards)
}

impl RewardModel for ImplicitReward<'_> {
    fn score(&self, obs: &PointSet, candidates: &[ActionPrimitive], rng: &mut Rng) -> Result<Vec<f64>> {
        let rows = candidates.len() * self.draws;
        let ctx_pl = broadcast_rows(&self.finetune.encode(obs)?, rows);
        let ctx_sl = broadcast_rows(&self.reference.encode(obs)?, rows);
        implicit_rewards_with(
            self.schedule,
            &self.finetune.with_contexts(&ctx_pl),
            &self.reference.with_contexts(&ctx_sl),
            candidates,
            self.beta,
            self.draws,
            rng,
        )
    }
}

/// Implicit reward of a single action.
pub fn implicit_reward(
    schedule: &NoiseSchedule,
    finetune: &PolicyNet,
    reference: &PolicyNet,
    action: &ActionPrimitive,
    obs: &PointSet,
    beta: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let model = ImplicitReward::new(schedule, finetune, reference, beta)?;
    Ok(model.score(obs, std::slice::from_ref(action), rng)?[0])
}

/// Learned reward head on the frozen reference encoder.
pub struct ExplicitReward<'a> {
    pub reference: &'a PolicyNet,
    pub head: &'a RewardHead,
}

impl RewardModel for ExplicitReward<'_> {
    fn score(&self, obs: &PointSet, candidates: &[ActionPrimitive], _rng: &mut Rng) -> Result<Vec<f64>> {
        let ctx = broadcast_rows(&self.reference.encode(obs)?, candidates.len());
        let mut x = Vec::with_capacity(candidates.len() * ACTION_DIM);
        for a in candidates {
            x.extend_from_slice(&a.normalized());
        }
        let actions = Tensor2::from_vec(candidates.len(), ACTION_DIM, x)?;
        self.head.rewards(&actions, &ctx)
    }
}

/// Greedy argmax; ties go to the lowest index.
pub fn select_action(candidates: &[ActionPrimitive], rewards: &[f64]) -> Result<ScoredAction> {
    if candidates.is_empty() {
        return Err(PamError::config("no candidate actions to select from"));
    }
    if rewards.len() != candidates.len() {
        return Err(PamError::invariant(format!(
            "{} rewards for {} candidates",
            rewards.len(),
            candidates.len()
        )));
    }
    if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(PamError::non_finite(format!("reward of candidate {i}")));
    }
    let mut best = 0;
    for (i, r) in rewards.iter().enumerate().skip(1) {
        if *r > rewards[best] {
            best = i;
        }
    }
    Ok(ScoredAction {
        action: candidates[best],
        reward: rewards[best],
        source_index: best,
    })
}

/// Samples `n` actions from the reference policy, scores them with `model`
/// and returns the best plus the whole scored batch.
///
/// Sampling uses substream `[0]` of `rng` and scoring substream `[1]`, so
/// candidates do not depend on the reward model.
pub fn infer_with_ras(
    schedule: &NoiseSchedule,
    reference: &PolicyNet,
    model: &dyn RewardModel,
    obs: &PointSet,
    kind: ActionKind,
    n: usize,
    rng: &Rng,
) -> Result<(ScoredAction, Vec<ScoredAction>)> {
    let candidates = reference.predict_actions(schedule, obs, kind, n, &rng.derive(&[0]))?;
    let rewards = model.score(obs, &candidates, &mut rng.derive(&[1]))?;
    let best = select_action(&candidates, &rewards)?;
    let all = candidates
        .iter()
        .zip(&rewards)
        .enumerate()
        .map(|(i, (a, r))| ScoredAction {
            action: *a,
            reward: *r,
            source_index: i,
        })
        .collect();
    Ok((best, all))
}

/// Min-max normalization within one batch; a constant batch maps to 0.5.
pub fn normalize_rewards(rewards: &[f64]) -> Vec<f64> {
    let lo = rewards.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; rewards.len()];
    }
    rewards.iter().map(|r| (r - lo) / (hi - lo)).collect()
}

/// Per-step inference log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub episode: String,
    pub step: usize,
    pub obs_id: String,
    pub candidates: Vec<ActionPrimitive>,
    pub rewards: Vec<f64>,
    pub normalized_rewards: Vec<f64>,
    pub selected: usize,
}

impl InferenceRecord {
    pub fn new(episode: &str, step: usize, scored: &[ScoredAction], selected: usize) -> Self {
        let rewards: Vec<f64> = scored.iter().map(|s| s.reward).collect();
        Self {
            episode: episode.to_string(),
            step,
            obs_id: format!("{episode}-s{step}"),
            candidates: scored.iter().map(|s| s.action).collect(),
            normalized_rewards: normalize_rewards(&rewards),
            rewards,
            selected,
        }
    }
}

/// Ranks starting at 1 with ties sharing their average rank.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` when either input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleConfig;
    use crate::envs::{Env, Task};
    use crate::oracle::{oracle_rank, post_step_emd};
    use crate::policy::PolicyArch;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(ScheduleConfig::default()).unwrap()
    }

    fn obs(seed: u64) -> PointSet {
        let mut rng = Rng::new(seed);
        PointSet::new((0..64).map(|_| [rng.uniform(), rng.uniform()]).collect()).unwrap()
    }

    fn net(seed: u64) -> PolicyNet {
        PolicyNet::new(&PolicyArch::with_widths(8, 16, 100), &mut Rng::new(seed)).unwrap()
    }

    fn actions(n: usize, seed: u64) -> Vec<ActionPrimitive> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|_| {
                ActionPrimitive::new(
                    ActionKind::PickPlace,
                    [rng.uniform(), rng.uniform()],
                    [rng.uniform(), rng.uniform()],
                )
            })
            .collect()
    }

    #[test]
    fn identical_networks_score_zero() {
        let s = schedule();
        let a = net(1);
        let model = ImplicitReward::new(&s, &a, &a, 100.0).unwrap();
        for seed in 0..5 {
            let r = model.score(&obs(seed), &actions(8, seed), &mut Rng::new(seed)).unwrap();
            assert!(r.iter().all(|&x| x == 0.0 && x.is_sign_positive()));
        }
    }

    #[test]
    fn better_denoiser_of_target_scores_positive() {
        let s = schedule();
        let target = ActionPrimitive::new(ActionKind::Sweep, [0.2, 0.3], [0.7, 0.6]);
        let a0 = target.normalized();
        let exact = |x: &Tensor2, t: &[usize]| {
            let mut out = Tensor2::zeros(x.rows(), x.cols());
            for i in 0..x.rows() {
                let ab = s.alpha_bar(t[i]);
                for k in 0..x.cols() {
                    out.set(i, k, (x.get(i, k) - ab.sqrt() * a0[k]) / (1.0 - ab).sqrt());
                }
            }
            Ok(out)
        };
        let zero = |x: &Tensor2, _: &[usize]| Ok(Tensor2::zeros(x.rows(), x.cols()));
        let r = implicit_rewards_with(&s, &exact, &zero, &[target], 100.0, 16, &mut Rng::new(2)).unwrap();
        assert!(r[0] > 0.0);
    }

    #[test]
    fn timesteps_stay_in_low_range() {
        let s = schedule();
        let seen = std::cell::RefCell::new(Vec::new());
        let probe = |x: &Tensor2, t: &[usize]| {
            seen.borrow_mut().extend_from_slice(t);
            Ok(Tensor2::zeros(x.rows(), x.cols()))
        };
        implicit_rewards_with(&s, &probe, &probe, &actions(4, 3), 100.0, 64, &mut Rng::new(3)).unwrap();
        let seen = seen.into_inner();
        assert!(seen.iter().all(|&t| (1..=10).contains(&t)));
        assert!(seen.contains(&1) && seen.contains(&10));
    }

    #[test]
    fn scores_are_deterministic() {
        let s = schedule();
        let (a, b) = (net(4), net(5));
        let model = ImplicitReward::new(&s, &a, &b, 100.0).unwrap();
        let cands = actions(8, 6);
        let x = model.score(&obs(7), &cands, &mut Rng::new(8)).unwrap();
        let y = model.score(&obs(7), &cands, &mut Rng::new(8)).unwrap();
        assert_eq!(x, y);
        // Shared draws: a candidate's score does not depend on its neighbors.
        let solo = model.score(&obs(7), &cands[3..4], &mut Rng::new(8)).unwrap();
        assert!((solo[0] - x[3]).abs() < 1e-9);
    }

    #[test]
    fn mismatched_architectures_rejected() {
        let s = schedule();
        let a = net(9);
        let b = PolicyNet::new(&PolicyArch::with_widths(8, 12, 100), &mut Rng::new(1)).unwrap();
        assert!(ImplicitReward::new(&s, &a, &b, 100.0).is_err());
    }

    #[test]
    fn selection_rules() {
        let c = actions(4, 10);
        assert_eq!(select_action(&c[..1], &[3.0]).unwrap().source_index, 0);
        assert_eq!(select_action(&c, &[0.1, 0.9, 0.9, 0.2]).unwrap().source_index, 1);
        assert!(select_action(&[], &[]).is_err());
        assert!(select_action(&c, &[0.1, f64::NAN, 0.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn argmax_survives_monotone_transforms(r in proptest::collection::vec(-10.0f64..10.0, 1..12), a in 0.01f64..5.0, b in -3.0f64..3.0) {
            let c = actions(r.len(), 11);
            let base = select_action(&c, &r).unwrap().source_index;
            let affine: Vec<f64> = r.iter().map(|x| a * x + b).collect();
            let cubic: Vec<f64> = r.iter().map(|x| x.powi(3) + x).collect();
            prop_assert_eq!(select_action(&c, &affine).unwrap().source_index, base);
            prop_assert_eq!(select_action(&c, &cubic).unwrap().source_index, base);
        }

        #[test]
        fn normalized_rewards_in_unit_interval(r in proptest::collection::vec(-10.0f64..10.0, 1..12)) {
            prop_assert!(normalize_rewards(&r).iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn single_sample_is_plain_inference() {
        let s = schedule();
        let (a, b) = (net(12), net(13));
        let model = ImplicitReward::new(&s, &b, &a, 100.0).unwrap();
        let o = obs(14);
        let rng = Rng::new(15);
        let (best, all) = infer_with_ras(&s, &a, &model, &o, ActionKind::Sweep, 1, &rng).unwrap();
        let plain = a.predict_actions(&s, &o, ActionKind::Sweep, 1, &rng.derive(&[0])).unwrap();
        assert_eq!(best.action, plain[0]);
        assert_eq!(all.len(), 1);
        let (_, eight) = infer_with_ras(&s, &a, &model, &o, ActionKind::Sweep, 8, &rng).unwrap();
        assert_eq!(eight.len(), 8);
        assert!(eight.iter().enumerate().all(|(i, x)| x.source_index == i));
    }

    #[test]
    fn oracle_reward_selects_oracle_best() {
        let s = schedule();
        let policy = net(16);
        let env = Env::standard(Task::Rope);
        let state = env.reset(&mut Rng::new(17));
        let o = state.observe();
        let oracle = |_: &PointSet, c: &[ActionPrimitive]| {
            c.iter().map(|a| post_step_emd(&env, &state, a).map(|e| -e)).collect::<Result<Vec<f64>>>()
        };
        let (best, all) = infer_with_ras(&s, &policy, &oracle, &o, ActionKind::PickPlace, 8, &Rng::new(18)).unwrap();
        let cands: Vec<ActionPrimitive> = all.iter().map(|x| x.action).collect();
        let (ranking, _) = oracle_rank(&env, &state, &cands).unwrap();
        let top = ranking.ordering.first().copied().unwrap_or(best.source_index);
        assert_eq!(best.source_index, top);
    }

    #[test]
    fn spearman_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
    }

    #[test]
    fn inference_record_round_trip() {
        let scored: Vec<ScoredAction> = actions(3, 19)
            .into_iter()
            .enumerate()
            .map(|(i, a)| ScoredAction {
                action: a,
                reward: i as f64,
                source_index: i,
            })
            .collect();
        let rec = InferenceRecord::new("ep0", 1, &scored, 2);
        assert_eq!(rec.obs_id, "ep0-s1");
        assert_eq!(rec.normalized_rewards, vec![0.0, 0.5, 1.0]);
        let back: InferenceRecord = serde_json::from_str(&serde_json::to_string(&rec).unwrap()).unwrap();
        assert_eq!(back, rec);
    }
}
