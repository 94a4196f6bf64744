use serde::{Deserialize, Serialize};

use super::action::{ActionPrimitive, PointSet, ACTION_DIM};
use super::net::{HeadGrads, PolicyGrads, PolicyNet};
use crate::diffusion::{l_simple, NoiseSchedule};
use crate::error::{PamError, Result};
use crate::nn::{AdamConfig, AdamState, Tensor2};
use crate::rng::Rng;

/// One observation with every action target it contributes (optimal first,
/// then auxiliaries). Each target is an independent regression term.
#[derive(Clone, Debug, PartialEq)]
pub struct SlSample {
    pub obs: PointSet,
    pub actions: Vec<ActionPrimitive>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Independent `(t, eps)` draws per action target in each epoch.
    pub draws_per_target: usize,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            lr: 1e-3,
            draws_per_target: 1,
        }
    }
}

/// Rows of normalized action targets and the observation each belongs to.
fn targets(data: &[SlSample], draws: usize) -> (Tensor2, Vec<usize>) {
    let mut x0 = Vec::new();
    let mut owner = Vec::new();
    for (o, s) in data.iter().enumerate() {
        for a in &s.actions {
            for _ in 0..draws {
                x0.extend_from_slice(&a.normalized());
                owner.push(o);
            }
        }
    }
    let rows = owner.len();
    (Tensor2::from_vec(rows, ACTION_DIM, x0).expect("sizes agree"), owner)
}

/// Mean noise-regression loss over every target of `data` (`draws`
/// independent `(t, eps)` draws per target) with gradients for the encoder
/// and head.
pub fn supervised_loss(
    net: &PolicyNet,
    schedule: &NoiseSchedule,
    data: &[SlSample],
    draws: usize,
    rng: &mut Rng,
) -> Result<(f64, PolicyGrads)> {
    if draws == 0 {
        return Err(PamError::config("need at least one noise draw per target"));
    }
    let obs: Vec<&PointSet> = data.iter().map(|s| &s.obs).collect();
    let (ctx, trace) = net.encode_traced(&obs)?;
    let (x0, owner) = targets(data, draws);
    let c = net.context_dim();
    let mut ctx_rows = Tensor2::zeros(owner.len(), c);
    for (i, &o) in owner.iter().enumerate() {
        ctx_rows.row_mut(i).copy_from_slice(ctx.row(o));
    }
    let mut hg = HeadGrads::new(net, owner.len());
    let loss = l_simple(schedule, &net.with_contexts(&ctx_rows), &x0, rng, &mut hg)?;
    let mut ctx_grad = Tensor2::zeros(data.len(), c);
    for (i, &o) in owner.iter().enumerate() {
        for (dst, src) in ctx_grad.row_mut(o).iter_mut().zip(hg.ctx.row(i)) {
            *dst += src;
        }
    }
    let mut grads = net.zero_grads();
    grads.head = hg.head;
    net.encode_backward(&trace, &ctx_grad, &mut grads.encoder);
    Ok((loss, grads))
}

/// Full-batch Adam on the noise-regression objective; returns the per-epoch loss.
///
/// Epoch `e` draws its noise from substream `[e]` of `rng`. An epoch whose
/// loss or gradient is non-finite is skipped and logged.
pub fn train_supervised(
    net: &mut PolicyNet,
    schedule: &NoiseSchedule,
    data: &[SlSample],
    cfg: &SupervisedConfig,
    rng: &Rng,
) -> Result<Vec<f64>> {
    if data.is_empty() || data.iter().all(|s| s.actions.is_empty()) {
        return Err(PamError::config("supervised dataset is empty"));
    }
    net.check_schedule(schedule)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::new(net.param_count());
    let mut params = net.flatten();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut erng = rng.derive(&[epoch as u64]);
        let (loss, grads) = match supervised_loss(net, schedule, data, cfg.draws_per_target, &mut erng) {
            Ok(v) => v,
            Err(PamError::NonFinite { context }) => {
                log::warn!("epoch {epoch}: skipping batch, non-finite {context}");
                continue;
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            log::warn!("epoch {epoch}: skipping batch, loss {loss}");
            continue;
        }
        if state.step(&adam, &mut params, &grads.flatten()).is_err() {
            continue;
        }
        net.load_flat(&params)?;
        curve.push(loss);
        if epoch % 200 == 0 {
            log::debug!("supervised epoch {epoch}: loss {loss:.5}");
        }
    }
    Ok(curve)
}
