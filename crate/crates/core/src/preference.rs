//! Preference pairs, the diffusion DPO objective and the explicit reward head.

use serde::{Deserialize, Serialize};

use crate::diffusion::{draw_noised, q_jump, squared_errors, DifferentiablePredictor, NoisePredictor, NoiseSchedule};
use crate::error::{PamError, Result};
use crate::nn::{AdamConfig, AdamState, Mlp, MlpShape, Tensor2};
use crate::oracle::OracleRanking;
use crate::policy::{ActionPrimitive, HeadGrads, PointSet, PolicyGrads, PolicyNet, ACTION_DIM};
use crate::rng::Rng;

/// One preference `winner > loser` under observation `obs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub winner: ActionPrimitive,
    pub loser: ActionPrimitive,
    pub obs: PointSet,
    /// Positions apart in the ranked order; cross-group and optimal-action
    /// pairs carry the sentinel `N` (candidate count).
    pub rank_distance: u32,
}

impl PreferencePair {
    pub fn validate(&self) -> Result<()> {
        self.winner.validate()?;
        self.loser.validate()?;
        self.obs.validate()?;
        if self.winner.kind != self.loser.kind {
            return Err(PamError::invariant("pair mixes action kinds"));
        }
        if self.winner.normalized_distance(&self.loser) == 0.0 {
            return Err(PamError::invariant("pair winner equals loser"));
        }
        if self.rank_distance == 0 {
            return Err(PamError::invariant("pair rank distance must be >= 1"));
        }
        Ok(())
    }
}

/// Expands one annotated state into its preference pairs: every rankable
/// pair (better over worse), rankable x unrankable, and the optimal action
/// over every candidate. Pairs whose two actions coincide exactly carry no
/// preference and are left out.
pub fn build_pairs(ranking: &OracleRanking, candidates: &[ActionPrimitive], obs: &PointSet) -> Vec<PreferencePair> {
    let n = candidates.len();
    if n == 0 {
        return Vec::new();
    }
    let sentinel = n as u32;
    let mut out = Vec::new();
    let mut push = |w: ActionPrimitive, l: ActionPrimitive, d: u32| {
        if w.normalized_distance(&l) > 0.0 {
            out.push(PreferencePair {
                winner: w,
                loser: l,
                obs: obs.clone(),
                rank_distance: d,
            });
        } else {
            log::debug!("dropping pair with identical actions");
        }
    };
    let ord = &ranking.ordering;
    for (i, &w) in ord.iter().enumerate() {
        for (j, &l) in ord.iter().enumerate().skip(i + 1) {
            push(candidates[w], candidates[l], (j - i) as u32);
        }
    }
    for &w in ord {
        for &l in &ranking.unrankable {
            push(candidates[w], candidates[l], sentinel);
        }
    }
    for c in candidates {
        push(ranking.optimal_action, *c, sentinel);
    }
    out
}

/// Closed-form pair count `C(r, 2) + r * u + N` for distinct actions.
pub fn expected_pair_count(rankable: usize, unrankable: usize) -> usize {
    rankable * rankable.saturating_sub(1) / 2 + rankable * unrankable + rankable + unrankable
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Bradley-Terry probability that the first action is preferred.
pub fn bt_probability(r_w: f64, r_l: f64) -> f64 {
    sigmoid(r_w - r_l)
}

/// Core of the DPO objective for `B` pairs stacked as `x0 = [winners; losers]`
/// (`2B` rows), with both predictors conditioned row-wise to match.
///
/// Each pair gets one `t ~ U{1..T}` and one `eps`, shared by its four error
/// terms. Returns the mean `softplus(-z)` over pairs with a finite value and
/// accumulates gradients of that mean into `grads`; non-finite pairs are
/// skipped and logged.
pub fn dpo_core<F: DifferentiablePredictor>(
    schedule: &NoiseSchedule,
    finetune: &F,
    reference: &impl NoisePredictor,
    x_w: &Tensor2,
    x_l: &Tensor2,
    beta: f64,
    rng: &mut Rng,
    grads: &mut F::Grads,
) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(PamError::config(format!("beta must be positive, got {beta}")));
    }
    let b = x_w.rows();
    if x_l.rows() != b || x_w.cols() != x_l.cols() {
        return Err(PamError::config("winner and loser batches differ in shape"));
    }
    if b == 0 {
        return Ok(0.0);
    }
    let d = x_w.cols();
    let draw = draw_noised(schedule, x_w, (1, schedule.steps()), rng)?;
    let mut x_t = Tensor2::zeros(2 * b, d);
    let mut noise = Tensor2::zeros(2 * b, d);
    let mut t = Vec::with_capacity(2 * b);
    t.extend_from_slice(&draw.t);
    t.extend_from_slice(&draw.t);
    for i in 0..b {
        x_t.row_mut(i).copy_from_slice(draw.x_t.row(i));
        let xl = q_jump(schedule, x_l.row(i), draw.t[i], draw.noise.row(i))?;
        x_t.row_mut(b + i).copy_from_slice(&xl);
        noise.row_mut(i).copy_from_slice(draw.noise.row(i));
        noise.row_mut(b + i).copy_from_slice(draw.noise.row(i));
    }
    let (pred, cache) = finetune.forward_cached(&x_t, &t)?;
    let ref_pred = reference.predict(&x_t, &t)?;
    let e_theta = squared_errors(&noise, &pred);
    let e_ref = squared_errors(&noise, &ref_pred);
    let scale = beta * schedule.steps() as f64;
    let mut z = Vec::with_capacity(b);
    let mut used = 0usize;
    let mut total = 0.0;
    for i in 0..b {
        let bracket = (e_theta[i] - e_ref[i]) - (e_theta[b + i] - e_ref[b + i]);
        let zi = -scale * bracket;
        let li = softplus(-zi);
        if li.is_finite() && zi.is_finite() {
            used += 1;
            total += li;
            z.push(Some(zi));
        } else {
            log::warn!("skipping preference pair {i}: non-finite DPO term");
            z.push(None);
        }
    }
    if used == 0 {
        return Err(PamError::non_finite("every DPO pair in the batch"));
    }
    let inv = 1.0 / used as f64;
    let mut gp = Tensor2::zeros(2 * b, d);
    for (i, zi) in z.iter().enumerate() {
        let Some(zi) = zi else { continue };
        // dL/dz for L = softplus(-z).
        let dz = -sigmoid(-zi) * inv;
        for (row, sign) in [(i, -scale), (b + i, scale)] {
            let g = dz * sign;
            for k in 0..d {
                gp.set(row, k, g * -2.0 * (noise.get(row, k) - pred.get(row, k)));
            }
        }
    }
    finetune.backward_cached(cache, gp, grads)?;
    Ok(total * inv)
}

fn pair_tensors(pairs: &[&PreferencePair]) -> (Tensor2, Tensor2) {
    let mut w = Vec::with_capacity(pairs.len() * ACTION_DIM);
    let mut l = Vec::with_capacity(pairs.len() * ACTION_DIM);
    for p in pairs {
        w.extend_from_slice(&p.winner.normalized());
        l.extend_from_slice(&p.loser.normalized());
    }
    (
        Tensor2::from_vec(pairs.len(), ACTION_DIM, w).expect("sizes agree"),
        Tensor2::from_vec(pairs.len(), ACTION_DIM, l).expect("sizes agree"),
    )
}

fn doubled(ctx: &Tensor2) -> Tensor2 {
    let mut data = ctx.data().to_vec();
    data.extend_from_slice(ctx.data());
    Tensor2::from_vec(2 * ctx.rows(), ctx.cols(), data).expect("sizes agree")
}

/// DPO loss over `pairs` given the reference contexts of their observations.
fn dpo_loss_cached(
    schedule: &NoiseSchedule,
    finetune: &PolicyNet,
    reference: &PolicyNet,
    pairs: &[&PreferencePair],
    ref_ctx: &Tensor2,
    beta: f64,
    rng: &mut Rng,
) -> Result<(f64, PolicyGrads)> {
    let obs: Vec<&PointSet> = pairs.iter().map(|p| &p.obs).collect();
    let (ctx, trace) = finetune.encode_traced(&obs)?;
    let ctx2 = doubled(&ctx);
    let ref2 = doubled(ref_ctx);
    let (x_w, x_l) = pair_tensors(pairs);
    let mut hg = HeadGrads::new(finetune, 2 * pairs.len());
    let loss = dpo_core(
        schedule,
        &finetune.with_contexts(&ctx2),
        &reference.with_contexts(&ref2),
        &x_w,
        &x_l,
        beta,
        rng,
        &mut hg,
    )?;
    let b = pairs.len();
    let mut ctx_grad = Tensor2::zeros(b, finetune.context_dim());
    for i in 0..b {
        for (k, g) in ctx_grad.row_mut(i).iter_mut().enumerate() {
            *g = hg.ctx.get(i, k) + hg.ctx.get(b + i, k);
        }
    }
    let mut grads = finetune.zero_grads();
    grads.head = hg.head;
    finetune.encode_backward(&trace, &ctx_grad, &mut grads.encoder);
    Ok((loss, grads))
}

/// Mean DPO loss over `pairs` with gradients for every finetune parameter.
/// The reference network only supplies constants.
pub fn dpo_loss(
    schedule: &NoiseSchedule,
    finetune: &PolicyNet,
    reference: &PolicyNet,
    pairs: &[PreferencePair],
    beta: f64,
    rng: &mut Rng,
) -> Result<(f64, PolicyGrads)> {
    check_compatible(finetune, reference)?;
    let refs: Vec<&PreferencePair> = pairs.iter().collect();
    let obs: Vec<&PointSet> = pairs.iter().map(|p| &p.obs).collect();
    let ref_ctx = reference.encode_batch(&obs)?;
    dpo_loss_cached(schedule, finetune, reference, &refs, &ref_ctx, beta, rng)
}

fn check_compatible(a: &PolicyNet, b: &PolicyNet) -> Result<()> {
    if a.arch() != b.arch() {
        return Err(PamError::config("finetune and reference architectures differ"));
    }
    Ok(())
}

fn check_pairs(pairs: &[PreferencePair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(PamError::config("preference dataset is empty"));
    }
    let kind = pairs[0].winner.kind;
    for (i, p) in pairs.iter().enumerate() {
        p.validate()
            .map_err(|e| PamError::config(format!("preference pair {i}: {e}")))?;
        if p.winner.kind != kind {
            return Err(PamError::config(format!("preference pair {i} has a different action kind")));
        }
    }
    Ok(())
}

/// Indices for one epoch: `pairs.len()` draws with replacement, proportional
/// to rank distance when `weighted`, else uniform.
fn epoch_order(pairs: &[PreferencePair], weighted: bool, rng: &mut Rng) -> Vec<usize> {
    let mut acc = 0.0;
    let cumulative: Vec<f64> = pairs
        .iter()
        .map(|p| {
            acc += if weighted { p.rank_distance as f64 } else { 1.0 };
            acc
        })
        .collect();
    (0..pairs.len()).map(|_| rng.weighted_index(&cumulative)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    pub beta: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Sample pairs proportionally to rank distance.
    pub weighted: bool,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 100.0,
            epochs: 200,
            lr: 1e-5,
            batch_size: 64,
            weighted: true,
        }
    }
}

/// Batch used for the initial loss evaluation.
const PROBE_PAIRS: usize = 256;

/// Finetunes a copy of `reference` on `pairs`.
///
/// The returned curve has `epochs + 1` entries: the loss of the untouched
/// copy (exactly `log 2`) followed by each epoch's mean minibatch loss. An
/// epoch draws `pairs.len()` pairs with replacement from substream `[e]`.
pub fn train_dpo(
    reference: &PolicyNet,
    schedule: &NoiseSchedule,
    pairs: &[PreferencePair],
    cfg: &DpoConfig,
    rng: &Rng,
) -> Result<(PolicyNet, Vec<f64>)> {
    check_pairs(pairs)?;
    reference.check_schedule(schedule)?;
    if cfg.batch_size == 0 {
        return Err(PamError::config("DPO batch size must be positive"));
    }
    let obs: Vec<&PointSet> = pairs.iter().map(|p| &p.obs).collect();
    let ref_ctx_all = reference.encode_batch(&obs)?;
    let gather = |idx: &[usize]| {
        let mut t = Tensor2::zeros(idx.len(), ref_ctx_all.cols());
        for (r, &i) in idx.iter().enumerate() {
            t.row_mut(r).copy_from_slice(ref_ctx_all.row(i));
        }
        t
    };
    let mut finetune = reference.clone();
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    let probe: Vec<usize> = (0..pairs.len().min(PROBE_PAIRS)).collect();
    let probe_refs: Vec<&PreferencePair> = probe.iter().map(|&i| &pairs[i]).collect();
    let (init, _) = dpo_loss_cached(
        schedule,
        &finetune,
        reference,
        &probe_refs,
        &gather(&probe),
        cfg.beta,
        &mut rng.derive(&[u64::MAX]),
    )?;
    curve.push(init);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::new(finetune.param_count());
    let mut params = finetune.flatten();
    for epoch in 0..cfg.epochs {
        let mut erng = rng.derive(&[epoch as u64]);
        let order = epoch_order(pairs, cfg.weighted, &mut erng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&PreferencePair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let (loss, grads) =
                match dpo_loss_cached(schedule, &finetune, reference, &refs, &gather(chunk), cfg.beta, &mut erng) {
                    Ok(v) => v,
                    Err(PamError::NonFinite { context }) => {
                        log::warn!("DPO epoch {epoch}: skipping batch, non-finite {context}");
                        continue;
                    }
                    Err(e) => return Err(e),
                };
            if state.step(&adam, &mut params, &grads.flatten()).is_err() {
                continue;
            }
            finetune.load_flat(&params)?;
            sum += loss;
            batches += 1;
        }
        let mean = if batches > 0 { sum / batches as f64 } else { f64::NAN };
        log::debug!("DPO epoch {epoch}: loss {mean:.6}");
        curve.push(mean);
    }
    Ok((finetune, curve))
}

/// Learned scalar reward on `(action, frozen context)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardHead {
    pub mlp: Mlp,
}

impl RewardHead {
    /// `(4 + context) -> hidden -> hidden -> 1` with a zeroed output layer,
    /// so an untrained head scores every action 0.
    pub fn new(context_dim: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        let mut mlp = Mlp::init(&Self::shape(context_dim, hidden), rng)?;
        let last = mlp.layers_mut().last_mut().expect("three layers");
        last.weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
        last.bias.iter_mut().for_each(|b| *b = 0.0);
        Ok(Self { mlp })
    }

    pub fn shape(context_dim: usize, hidden: usize) -> MlpShape {
        MlpShape::tanh_hidden(&[ACTION_DIM + context_dim, hidden, hidden, 1])
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        if mlp.output_dim() != 1 || mlp.input_dim() <= ACTION_DIM {
            return Err(PamError::config(format!(
                "reward head must map {}+context -> 1, got {} -> {}",
                ACTION_DIM,
                mlp.input_dim(),
                mlp.output_dim()
            )));
        }
        Ok(Self { mlp })
    }

    pub fn context_dim(&self) -> usize {
        self.mlp.input_dim() - ACTION_DIM
    }

    fn inputs(actions: &Tensor2, ctx: &Tensor2) -> Tensor2 {
        let c = ctx.cols();
        let mut x = Tensor2::zeros(actions.rows(), ACTION_DIM + c);
        for i in 0..actions.rows() {
            let row = x.row_mut(i);
            row[..ACTION_DIM].copy_from_slice(actions.row(i));
            row[ACTION_DIM..].copy_from_slice(ctx.row(i));
        }
        x
    }

    /// Rewards of normalized `actions` (rows) under matching context rows.
    pub fn rewards(&self, actions: &Tensor2, ctx: &Tensor2) -> Result<Vec<f64>> {
        self.check_ctx(ctx)?;
        Ok(self.mlp.forward_batch(&Self::inputs(actions, ctx))?.into_data())
    }

    fn check_ctx(&self, ctx: &Tensor2) -> Result<()> {
        if ctx.cols() != self.context_dim() {
            return Err(PamError::config(format!(
                "reward head expects context width {}, got {}",
                self.context_dim(),
                ctx.cols()
            )));
        }
        Ok(())
    }
}

/// Mean `-log bt(r_w, r_l)` over a batch and its head gradient.
pub fn explicit_loss(head: &RewardHead, x_w: &Tensor2, x_l: &Tensor2, ctx: &Tensor2) -> Result<(f64, Mlp)> {
    head.check_ctx(ctx)?;
    let b = x_w.rows();
    let mut grads = head.mlp.zeros_like();
    if b == 0 {
        return Ok((0.0, grads));
    }
    let mut stacked = RewardHead::inputs(x_w, ctx).into_data();
    stacked.extend(RewardHead::inputs(x_l, ctx).into_data());
    let input = Tensor2::from_vec(2 * b, head.mlp.input_dim(), stacked)?;
    let trace = head.mlp.forward_trace(input)?;
    let r = trace.output().data();
    let mut loss = 0.0;
    let mut g = Tensor2::zeros(2 * b, 1);
    for i in 0..b {
        let margin = r[i] - r[b + i];
        loss += softplus(-margin);
        let d = -sigmoid(-margin) / b as f64;
        g.set(i, 0, d);
        g.set(b + i, 0, -d);
    }
    head.mlp.backward_trace(&trace, g, &mut grads);
    Ok((loss / b as f64, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplicitConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weighted: bool,
}

impl Default for ExplicitConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-3,
            batch_size: 64,
            weighted: true,
        }
    }
}

/// Trains `head` on `pairs` with the reference encoder frozen. Returns the
/// curve with the initial loss first, then one mean per epoch.
pub fn train_explicit_reward(
    reference: &PolicyNet,
    head: &mut RewardHead,
    pairs: &[PreferencePair],
    cfg: &ExplicitConfig,
    rng: &Rng,
) -> Result<Vec<f64>> {
    check_pairs(pairs)?;
    if head.context_dim() != reference.context_dim() {
        return Err(PamError::config("reward head context width differs from the reference encoder"));
    }
    if cfg.batch_size == 0 {
        return Err(PamError::config("reward head batch size must be positive"));
    }
    let obs: Vec<&PointSet> = pairs.iter().map(|p| &p.obs).collect();
    let ctx_all = reference.encode_batch(&obs)?;
    let batch = |idx: &[usize]| {
        let refs: Vec<&PreferencePair> = idx.iter().map(|&i| &pairs[i]).collect();
        let (w, l) = pair_tensors(&refs);
        let mut c = Tensor2::zeros(idx.len(), ctx_all.cols());
        for (r, &i) in idx.iter().enumerate() {
            c.row_mut(r).copy_from_slice(ctx_all.row(i));
        }
        (w, l, c)
    };
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    let all: Vec<usize> = (0..pairs.len()).collect();
    let (w, l, c) = batch(&all);
    curve.push(explicit_loss(head, &w, &l, &c)?.0);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::new(head.mlp.param_count());
    let mut params = head.mlp.flatten();
    for epoch in 0..cfg.epochs {
        let mut erng = rng.derive(&[epoch as u64]);
        let order = epoch_order(pairs, cfg.weighted, &mut erng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (w, l, c) = batch(chunk);
            let (loss, grads) = match explicit_loss(head, &w, &l, &c) {
                Ok(v) => v,
                Err(PamError::NonFinite { context }) => {
                    log::warn!("reward epoch {epoch}: skipping batch, non-finite {context}");
                    continue;
                }
                Err(e) => return Err(e),
            };
            if state.step(&adam, &mut params, &grads.flatten()).is_err() {
                continue;
            }
            head.mlp.load_flat(&params)?;
            sum += loss;
            batches += 1;
        }
        curve.push(if batches > 0 { sum / batches as f64 } else { f64::NAN });
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleConfig;
    use crate::policy::{ActionKind, PolicyArch};
    use proptest::prelude::{prop_assert, prop_assert_eq, prop_assume, proptest};

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(ScheduleConfig::default()).unwrap()
    }

    fn obs(seed: u64) -> PointSet {
        let mut rng = Rng::new(seed);
        PointSet::new((0..64).map(|_| [rng.uniform(), rng.uniform()]).collect()).unwrap()
    }

    fn action(rng: &mut Rng) -> ActionPrimitive {
        ActionPrimitive::new(
            ActionKind::Sweep,
            [rng.uniform(), rng.uniform()],
            [rng.uniform(), rng.uniform()],
        )
    }

    fn ranking(r: usize, u: usize, rng: &mut Rng) -> (OracleRanking, Vec<ActionPrimitive>) {
        let n = r + u;
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            idx.swap(i, rng.below(i + 1));
        }
        let cands = (0..n).map(|_| action(rng)).collect();
        (
            OracleRanking {
                ordering: idx[..r].to_vec(),
                unrankable: idx[r..].to_vec(),
                optimal_action: action(rng),
            },
            cands,
        )
    }

    fn random_pairs(n: usize, seed: u64) -> Vec<PreferencePair> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|i| PreferencePair {
                winner: action(&mut rng),
                loser: action(&mut rng),
                obs: obs(seed * 1000 + i as u64 % 3),
                rank_distance: 1 + rng.below(8) as u32,
            })
            .collect()
    }

    fn tiny_net(seed: u64) -> PolicyNet {
        PolicyNet::new(&PolicyArch::with_widths(6, 10, 100), &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn pair_counts_for_worked_partitions() {
        let mut rng = Rng::new(1);
        for (r, u, want) in [(3, 2, 14), (0, 8, 8), (1, 0, 1)] {
            let (rank, cands) = ranking(r, u, &mut rng);
            let pairs = build_pairs(&rank, &cands, &obs(2));
            assert_eq!(pairs.len(), want);
            assert_eq!(expected_pair_count(r, u), want);
            if r == 0 {
                assert!(pairs.iter().all(|p| p.winner == rank.optimal_action));
            }
        }
        assert!(build_pairs(&OracleRanking {
            ordering: vec![],
            unrankable: vec![],
            optimal_action: action(&mut rng),
        }, &[], &obs(2))
        .is_empty());
    }

    #[test]
    fn intra_pairs_respect_order_and_distance() {
        let mut rng = Rng::new(3);
        let (rank, cands) = ranking(4, 2, &mut rng);
        let pairs = build_pairs(&rank, &cands, &obs(4));
        let pos = |a: &ActionPrimitive| rank.ordering.iter().position(|&i| cands[i] == *a);
        for p in &pairs {
            match (pos(&p.winner), pos(&p.loser)) {
                (Some(w), Some(l)) => {
                    assert!(w < l);
                    assert_eq!(p.rank_distance as usize, l - w);
                }
                _ => assert_eq!(p.rank_distance, 6),
            }
            p.validate().unwrap();
        }
    }

    proptest! {
        #[test]
        fn pair_count_matches_closed_form(r in 0usize..9, u in 0usize..9, seed in 0u64..1000) {
            prop_assume!(r + u > 0);
            let mut rng = Rng::new(seed);
            let (rank, cands) = ranking(r, u, &mut rng);
            let pairs = build_pairs(&rank, &cands, &obs(seed));
            // Enumerate the three sets directly.
            let mut brute = 0;
            for i in 0..r { for j in 0..r { if i < j { brute += 1; } } }
            brute += r * u + cands.len();
            prop_assert_eq!(pairs.len(), brute);
            prop_assert_eq!(pairs.len(), expected_pair_count(r, u));
        }

        #[test]
        fn bt_complements(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            prop_assert!((bt_probability(a, b) + bt_probability(b, a) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bt_values() {
        assert_eq!(bt_probability(0.3, 0.3), 0.5);
        assert!((bt_probability(1.0, 0.0) - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        assert!(softplus(1000.0).is_finite() && softplus(-1000.0) >= 0.0);
    }

    #[test]
    fn identical_networks_give_log2() {
        let net = tiny_net(5);
        for seed in 0..5 {
            let pairs = random_pairs(7, seed);
            let (loss, _) = dpo_loss(&schedule(), &net, &net, &pairs, 100.0, &mut Rng::new(seed)).unwrap();
            assert!((loss - std::f64::consts::LN_2).abs() < 1e-12, "{loss}");
        }
    }

    /// Denoises one fixed action perfectly.
    struct Exact<'a> {
        s: &'a NoiseSchedule,
        a: Vec<f64>,
    }

    impl NoisePredictor for Exact<'_> {
        fn predict(&self, x_t: &Tensor2, t: &[usize]) -> Result<Tensor2> {
            let mut out = Tensor2::zeros(x_t.rows(), x_t.cols());
            for i in 0..x_t.rows() {
                let ab = self.s.alpha_bar(t[i]);
                for k in 0..x_t.cols() {
                    out.set(i, k, (x_t.get(i, k) - ab.sqrt() * self.a[k]) / (1.0 - ab).sqrt());
                }
            }
            Ok(out)
        }
    }

    impl DifferentiablePredictor for Exact<'_> {
        type Cache = ();
        type Grads = ();
        fn forward_cached(&self, x_t: &Tensor2, t: &[usize]) -> Result<(Tensor2, ())> {
            Ok((self.predict(x_t, t)?, ()))
        }
        fn backward_cached(&self, _: (), _: Tensor2, _: &mut ()) -> Result<()> {
            Ok(())
        }
    }

    #[test]
    fn better_on_winner_lowers_loss() {
        let s = schedule();
        let zero = |x: &Tensor2, _: &[usize]| Ok(Tensor2::zeros(x.rows(), x.cols()));
        let w = vec![0.5, -0.2, 0.1, 0.3];
        let l = vec![-0.6, 0.4, -0.3, 0.2];
        let fine = Exact { s: &s, a: w.clone() };
        let xw = Tensor2::from_rows(&vec![w.clone(); 16]).unwrap();
        let xl = Tensor2::from_rows(&vec![l.clone(); 16]).unwrap();
        let loss = dpo_core(&s, &fine, &zero, &xw, &xl, 100.0, &mut Rng::new(6), &mut ()).unwrap();
        assert!(loss < std::f64::consts::LN_2, "{loss}");
        // Swapped roles raise it.
        let swapped = dpo_core(&s, &fine, &zero, &xl, &xw, 100.0, &mut Rng::new(6), &mut ()).unwrap();
        assert!(swapped > std::f64::consts::LN_2);
    }

    #[test]
    fn swap_sum_at_least_two_log2() {
        let reference = tiny_net(7);
        let mut fine = tiny_net(8);
        let mut p = fine.flatten();
        let r = reference.flatten();
        // Small perturbation of the reference keeps the bracket moderate.
        for (a, b) in p.iter_mut().zip(&r) {
            *a = b + (*a - b) * 1e-3;
        }
        fine.load_flat(&p).unwrap();
        for seed in 0..20 {
            let pair = random_pairs(1, seed);
            let mut sw = pair.clone();
            let p = &mut sw[0];
            std::mem::swap(&mut p.winner, &mut p.loser);
            let a = dpo_loss(&schedule(), &fine, &reference, &pair, 100.0, &mut Rng::new(seed)).unwrap().0;
            let b = dpo_loss(&schedule(), &fine, &reference, &sw, 100.0, &mut Rng::new(seed)).unwrap().0;
            assert!(a + b >= 2.0 * std::f64::consts::LN_2 - 1e-12);
        }
        let pair = random_pairs(1, 99);
        let mut sw = pair.clone();
        let p = &mut sw[0];
            std::mem::swap(&mut p.winner, &mut p.loser);
        let a = dpo_loss(&schedule(), &reference, &reference, &pair, 100.0, &mut Rng::new(1)).unwrap().0;
        let b = dpo_loss(&schedule(), &reference, &reference, &sw, 100.0, &mut Rng::new(1)).unwrap().0;
        assert_eq!(a + b, 2.0 * std::f64::consts::LN_2);
    }

    fn check_fd(f: &mut dyn FnMut(&[f64]) -> f64, base: &[f64], g: &[f64], stride: usize) {
        let h = 1e-6;
        for idx in (0..base.len()).step_by(stride) {
            let mut p = base.to_vec();
            p[idx] += h;
            let up = f(&p);
            p[idx] -= 2.0 * h;
            let down = f(&p);
            let fd = (up - down) / (2.0 * h);
            assert!(
                (fd - g[idx]).abs() <= 1e-4 * fd.abs().max(g[idx].abs()).max(1e-4),
                "param {idx}: fd {fd} analytic {}",
                g[idx]
            );
        }
    }

    #[test]
    fn dpo_gradient_matches_finite_differences() {
        let reference = tiny_net(9);
        let mut fine = tiny_net(10);
        let mut p = fine.flatten();
        for (a, b) in p.iter_mut().zip(reference.flatten()) {
            *a = b + (*a - b) * 1e-3;
        }
        fine.load_flat(&p).unwrap();
        let pairs = random_pairs(4, 11);
        let s = schedule();
        // Smaller beta keeps the sigmoid away from saturation.
        let beta = 0.1;
        let (_, grads) = dpo_loss(&s, &fine, &reference, &pairs, beta, &mut Rng::new(12)).unwrap();
        let g = grads.flatten();
        let base = fine.flatten();
        let mut probe = fine.clone();
        check_fd(
            &mut |x| {
                probe.load_flat(x).unwrap();
                dpo_loss(&s, &probe, &reference, &pairs, beta, &mut Rng::new(12)).unwrap().0
            },
            &base,
            &g,
            13,
        );
    }

    #[test]
    fn first_curve_entry_is_log2_and_loss_drops() {
        let reference = tiny_net(13);
        let s = schedule();
        // Separable: winners always sweep toward the lower-left, losers upward.
        let mut rng = Rng::new(14);
        let pairs: Vec<PreferencePair> = (0..40)
            .map(|i| {
                let start = [0.4 + 0.2 * rng.uniform(), 0.4 + 0.2 * rng.uniform()];
                PreferencePair {
                    winner: ActionPrimitive::new(ActionKind::Sweep, start, [0.1, 0.1]),
                    loser: ActionPrimitive::new(ActionKind::Sweep, start, [0.9, 0.9]),
                    obs: obs(100 + i % 4),
                    rank_distance: 1,
                }
            })
            .collect();
        let cfg = DpoConfig {
            epochs: 30,
            lr: 1e-3,
            batch_size: 16,
            ..DpoConfig::default()
        };
        let (fine, curve) = train_dpo(&reference, &s, &pairs, &cfg, &Rng::new(15)).unwrap();
        assert!((curve[0] - std::f64::consts::LN_2).abs() < 1e-9);
        assert_eq!(curve.len(), 31);
        let tail: f64 = curve[21..].iter().sum::<f64>() / 10.0;
        assert!(tail < std::f64::consts::LN_2, "{tail}");
        assert_ne!(fine, reference);
        let again = train_dpo(&reference, &s, &pairs, &cfg, &Rng::new(15)).unwrap();
        assert_eq!(again.1, curve);
    }

    #[test]
    fn dpo_rejects_bad_inputs() {
        let reference = tiny_net(16);
        let s = schedule();
        assert!(train_dpo(&reference, &s, &[], &DpoConfig::default(), &Rng::new(1)).is_err());
        let mut pairs = random_pairs(2, 17);
        pairs[1].loser = pairs[1].winner;
        assert!(train_dpo(&reference, &s, &pairs, &DpoConfig::default(), &Rng::new(1)).is_err());
        let other = PolicyNet::new(&PolicyArch::with_widths(6, 12, 100), &mut Rng::new(1)).unwrap();
        assert!(dpo_loss(&s, &other, &reference, &random_pairs(1, 1), 100.0, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn weighted_sampling_prefers_distant_pairs() {
        let mut pairs = random_pairs(2, 18);
        pairs[0].rank_distance = 1;
        pairs[1].rank_distance = 9;
        let mut rng = Rng::new(19);
        let mut far = 0;
        for _ in 0..500 {
            far += epoch_order(&pairs, true, &mut rng).iter().filter(|&&i| i == 1).count();
        }
        let frac = far as f64 / 1000.0;
        assert!((frac - 0.9).abs() < 0.03, "{frac}");
    }

    #[test]
    fn zero_head_scores_log2() {
        let reference = tiny_net(20);
        let head = RewardHead::new(reference.context_dim(), 16, &mut Rng::new(21)).unwrap();
        let pairs = random_pairs(5, 22);
        let refs: Vec<&PreferencePair> = pairs.iter().collect();
        let (w, l) = pair_tensors(&refs);
        let obs: Vec<&PointSet> = pairs.iter().map(|p| &p.obs).collect();
        let ctx = reference.encode_batch(&obs).unwrap();
        let (loss, _) = explicit_loss(&head, &w, &l, &ctx).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(head.rewards(&w, &ctx).unwrap().iter().all(|&r| r == 0.0));
    }

    #[test]
    fn explicit_gradient_matches_finite_differences() {
        let reference = tiny_net(23);
        let mut head = RewardHead::new(reference.context_dim(), 8, &mut Rng::new(24)).unwrap();
        // Non-zero output layer so every parameter has a gradient.
        let mut p = head.mlp.flatten();
        let mut rng = Rng::new(25);
        p.iter_mut().for_each(|x| *x += 0.3 * rng.normal());
        head.mlp.load_flat(&p).unwrap();
        let pairs = random_pairs(6, 26);
        let refs: Vec<&PreferencePair> = pairs.iter().collect();
        let (w, l) = pair_tensors(&refs);
        let obs: Vec<&PointSet> = pairs.iter().map(|p| &p.obs).collect();
        let ctx = reference.encode_batch(&obs).unwrap();
        let (_, g) = explicit_loss(&head, &w, &l, &ctx).unwrap();
        let mut probe = head.clone();
        check_fd(
            &mut |x| {
                probe.mlp.load_flat(x).unwrap();
                explicit_loss(&probe, &w, &l, &ctx).unwrap().0
            },
            &p,
            &g.flatten(),
            3,
        );
    }

    #[test]
    fn explicit_head_separates_toy_pairs() {
        let reference = tiny_net(27);
        let mut head = RewardHead::new(reference.context_dim(), 32, &mut Rng::new(28)).unwrap();
        let mut rng = Rng::new(29);
        // Winners end left of their start, losers right.
        let pairs: Vec<PreferencePair> = (0..60)
            .map(|i| {
                let s = [0.3 + 0.4 * rng.uniform(), rng.uniform()];
                let dy = rng.uniform() - 0.5;
                PreferencePair {
                    winner: ActionPrimitive::new(ActionKind::Sweep, s, [s[0] - 0.25, (s[1] + dy).clamp(0.0, 1.0)]),
                    loser: ActionPrimitive::new(ActionKind::Sweep, s, [s[0] + 0.25, (s[1] - dy).clamp(0.0, 1.0)]),
                    obs: obs(200 + i % 5),
                    rank_distance: 3,
                }
            })
            .collect();
        let cfg = ExplicitConfig {
            epochs: 150,
            batch_size: 20,
            ..ExplicitConfig::default()
        };
        let curve = train_explicit_reward(&reference, &mut head, &pairs, &cfg, &Rng::new(30)).unwrap();
        assert!((curve[0] - std::f64::consts::LN_2).abs() < 1e-15);
        let refs: Vec<&PreferencePair> = pairs.iter().collect();
        let (w, l) = pair_tensors(&refs);
        let obs: Vec<&PointSet> = pairs.iter().map(|p| &p.obs).collect();
        let ctx = reference.encode_batch(&obs).unwrap();
        let rw = head.rewards(&w, &ctx).unwrap();
        let rl = head.rewards(&l, &ctx).unwrap();
        let acc = rw.iter().zip(&rl).filter(|(a, b)| a > b).count() as f64 / pairs.len() as f64;
        assert!(acc >= 0.95, "accuracy {acc}");
    }
}
