use serde::{Deserialize, Serialize};

use super::action::{ActionKind, ActionPrimitive, PointSet, ACTION_DIM};
use crate::diffusion::{ddpm_sample_batch, DifferentiablePredictor, NoisePredictor, NoiseSchedule};
use crate::error::{PamError, Result};
use crate::nn::{Mlp, MlpShape, Tensor2, Trace};
use crate::rng::Rng;

/// Width of the timestep encoding: `t / T` plus two sin/cos pairs.
pub const TIME_FEATURES: usize = 5;
const TIME_FREQUENCIES: [f64; 2] = [std::f64::consts::PI, 8.0 * std::f64::consts::PI];

pub fn timestep_features(t: usize, steps: usize) -> [f64; TIME_FEATURES] {
    let tau = t as f64 / steps as f64;
    let [w0, w1] = TIME_FREQUENCIES;
    [
        tau,
        (w0 * tau).sin(),
        (w0 * tau).cos(),
        (w1 * tau).sin(),
        (w1 * tau).cos(),
    ]
}

/// Architecture descriptor for [`PolicyNet`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyArch {
    pub encoder: MlpShape,
    pub head: MlpShape,
    pub steps: usize,
}

impl PolicyArch {
    /// Per-point 2->64->64 encoder, head (4+64+5)->128->128->4.
    pub fn standard(steps: usize) -> Self {
        Self::with_widths(64, 128, steps)
    }

    pub fn with_widths(context: usize, hidden: usize, steps: usize) -> Self {
        Self {
            encoder: MlpShape::all_tanh(&[2, context, context]),
            head: MlpShape::tanh_hidden(&[
                ACTION_DIM + context + TIME_FEATURES,
                hidden,
                hidden,
                ACTION_DIM,
            ]),
            steps,
        }
    }

    pub fn context_dim(&self) -> usize {
        *self.encoder.dims.last().expect("validated shape")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()?;
        let want = ACTION_DIM + self.context_dim() + TIME_FEATURES;
        if self.encoder.dims[0] != 2 || self.head.dims[0] != want {
            return Err(PamError::config(format!(
                "policy arch mismatch: encoder input {} head input {} (want 2, {want})",
                self.encoder.dims[0], self.head.dims[0]
            )));
        }
        if *self.head.dims.last().expect("validated") != ACTION_DIM {
            return Err(PamError::config("policy head must emit 4 values"));
        }
        if self.steps == 0 {
            return Err(PamError::config("policy arch needs steps > 0"));
        }
        Ok(())
    }
}

/// PointNet-style mean-pooled encoder feeding a noise-prediction head.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    pub encoder: Mlp,
    pub head: Mlp,
    steps: usize,
}

/// Gradient container matching [`PolicyNet`].
#[derive(Clone, Debug)]
pub struct PolicyGrads {
    pub encoder: Mlp,
    pub head: Mlp,
}

impl PolicyGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.encoder.flatten();
        self.head.flatten_into(&mut v);
        v
    }
}

/// Observation points mapped to `[-1, 1]`, stacked for a batch of observations.
fn stacked_points(obs: &[&PointSet]) -> Result<Tensor2> {
    let mut data = Vec::new();
    for o in obs {
        o.validate()?;
        for p in &o.points {
            data.push(2.0 * p[0] - 1.0);
            data.push(2.0 * p[1] - 1.0);
        }
    }
    Tensor2::from_vec(data.len() / 2, 2, data)
}

/// Encoder activations kept for back-propagating context gradients.
pub struct EncodeTrace {
    trace: Trace,
    per_obs: Vec<usize>,
}

impl PolicyNet {
    pub fn new(arch: &PolicyArch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            encoder: Mlp::init(&arch.encoder, rng)?,
            head: Mlp::init(&arch.head, rng)?,
            steps: arch.steps,
        })
    }

    pub fn from_parts(encoder: Mlp, head: Mlp, steps: usize) -> Result<Self> {
        let net = Self {
            encoder,
            head,
            steps,
        };
        net.arch().validate()?;
        Ok(net)
    }

    pub fn arch(&self) -> PolicyArch {
        PolicyArch {
            encoder: self.encoder.shape(),
            head: self.head.shape(),
            steps: self.steps,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn context_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.head.param_count()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.encoder.flatten();
        self.head.flatten_into(&mut v);
        v
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(PamError::config(format!(
                "expected {} policy parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let n = self.encoder.load_flat(flat)?;
        self.head.load_flat(&flat[n..])?;
        Ok(())
    }

    pub fn zero_grads(&self) -> PolicyGrads {
        PolicyGrads {
            encoder: self.encoder.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    /// Permutation-invariant context vector of one observation.
    pub fn encode(&self, obs: &PointSet) -> Result<Vec<f64>> {
        Ok(self.encode_batch(&[obs])?.into_data())
    }

    /// One context row per observation.
    pub fn encode_batch(&self, obs: &[&PointSet]) -> Result<Tensor2> {
        let feats = self.encoder.forward_batch(&stacked_points(obs)?)?;
        Ok(mean_pool(&feats, &obs.iter().map(|o| o.len()).collect::<Vec<_>>(), self.context_dim()))
    }

    pub fn encode_traced(&self, obs: &[&PointSet]) -> Result<(Tensor2, EncodeTrace)> {
        let trace = self.encoder.forward_trace(stacked_points(obs)?)?;
        let per_obs: Vec<usize> = obs.iter().map(|o| o.len()).collect();
        let ctx = mean_pool(trace.output(), &per_obs, self.context_dim());
        Ok((ctx, EncodeTrace { trace, per_obs }))
    }

    /// Back-propagates `ctx_grad` (one row per observation) into the encoder.
    pub fn encode_backward(&self, trace: &EncodeTrace, ctx_grad: &Tensor2, grads: &mut Mlp) {
        let c = self.context_dim();
        let mut g = Tensor2::zeros(trace.trace.output().rows(), c);
        let mut row = 0;
        for (o, &m) in trace.per_obs.iter().enumerate() {
            let scale = 1.0 / m as f64;
            for _ in 0..m {
                for (dst, src) in g.row_mut(row).iter_mut().zip(ctx_grad.row(o)) {
                    *dst = src * scale;
                }
                row += 1;
            }
        }
        self.encoder.backward_trace(&trace.trace, g, grads);
    }

    /// Head input rows `[x_t | context | time features]`.
    pub fn head_input(&self, x_t: &Tensor2, ctx: &Tensor2, t: &[usize]) -> Result<Tensor2> {
        let c = self.context_dim();
        if x_t.cols() != ACTION_DIM || ctx.cols() != c || ctx.rows() != x_t.rows() || t.len() != x_t.rows() {
            return Err(PamError::config(format!(
                "head input mismatch: x_t {}x{}, ctx {}x{}, {} timesteps",
                x_t.rows(),
                x_t.cols(),
                ctx.rows(),
                ctx.cols(),
                t.len()
            )));
        }
        let width = ACTION_DIM + c + TIME_FEATURES;
        let mut out = Tensor2::zeros(x_t.rows(), width);
        for i in 0..x_t.rows() {
            let row = out.row_mut(i);
            row[..ACTION_DIM].copy_from_slice(x_t.row(i));
            row[ACTION_DIM..ACTION_DIM + c].copy_from_slice(ctx.row(i));
            row[ACTION_DIM + c..].copy_from_slice(&timestep_features(t[i], self.steps));
        }
        Ok(out)
    }

    /// Noise predictor whose row `i` is conditioned on `ctx` row `i`.
    pub fn with_contexts<'a>(&'a self, ctx: &'a Tensor2) -> ConditionedPolicy<'a> {
        ConditionedPolicy { net: self, ctx }
    }

    /// Draws `n` actions for `obs`: one shared encoding, `n` independent
    /// denoising chains batched through the head.
    ///
    /// Sample slot `i` uses substream `[i]` of `rng`; a slot whose chain turns
    /// non-finite is redrawn once from substream `[i, 1]`.
    pub fn predict_actions(
        &self,
        schedule: &NoiseSchedule,
        obs: &PointSet,
        kind: ActionKind,
        n: usize,
        rng: &Rng,
    ) -> Result<Vec<ActionPrimitive>> {
        if n == 0 {
            return Err(PamError::config("predict_actions needs n >= 1"));
        }
        self.check_schedule(schedule)?;
        let ctx = self.encode(obs)?;
        let ctx_rows = broadcast_rows(&ctx, n);
        let predictor = self.with_contexts(&ctx_rows);
        let mut rngs: Vec<Rng> = (0..n as u64).map(|i| rng.derive(&[i])).collect();
        let samples = ddpm_sample_batch(schedule, &predictor, ACTION_DIM, &mut rngs)?;
        let mut out = Vec::with_capacity(n);
        for (i, s) in samples.into_iter().enumerate() {
            let x = match s {
                Ok(x) => x,
                Err(first) => {
                    log::warn!("sample slot {i} failed ({first}); redrawing");
                    let one = broadcast_rows(&ctx, 1);
                    let mut retry = [rng.derive(&[i as u64, 1])];
                    ddpm_sample_batch(schedule, &self.with_contexts(&one), ACTION_DIM, &mut retry)?
                        .pop()
                        .expect("one sample")?
                }
            };
            out.push(ActionPrimitive::from_normalized(kind, &x));
        }
        Ok(out)
    }

    pub fn check_schedule(&self, schedule: &NoiseSchedule) -> Result<()> {
        if schedule.steps() != self.steps {
            return Err(PamError::config(format!(
                "network trained for T={} but schedule has T={}",
                self.steps,
                schedule.steps()
            )));
        }
        Ok(())
    }
}

fn mean_pool(feats: &Tensor2, per_obs: &[usize], c: usize) -> Tensor2 {
    let mut ctx = Tensor2::zeros(per_obs.len(), c);
    let mut row = 0;
    for (o, &m) in per_obs.iter().enumerate() {
        let acc = ctx.row_mut(o);
        for _ in 0..m {
            for (a, f) in acc.iter_mut().zip(feats.row(row)) {
                *a += f;
            }
            row += 1;
        }
        let inv = 1.0 / m as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
    }
    ctx
}

/// `n` copies of `v` as rows.
pub fn broadcast_rows(v: &[f64], n: usize) -> Tensor2 {
    let mut data = Vec::with_capacity(v.len() * n);
    for _ in 0..n {
        data.extend_from_slice(v);
    }
    Tensor2::from_vec(n, v.len(), data).expect("sizes agree")
}

/// [`PolicyNet`] head bound to per-row contexts.
pub struct ConditionedPolicy<'a> {
    net: &'a PolicyNet,
    ctx: &'a Tensor2,
}

/// Gradients from the head: parameters plus the per-row context gradient.
pub struct HeadGrads {
    pub head: Mlp,
    pub ctx: Tensor2,
}

impl HeadGrads {
    pub fn new(net: &PolicyNet, rows: usize) -> Self {
        Self {
            head: net.head.zeros_like(),
            ctx: Tensor2::zeros(rows, net.context_dim()),
        }
    }
}

impl NoisePredictor for ConditionedPolicy<'_> {
    fn predict(&self, x_t: &Tensor2, t: &[usize]) -> Result<Tensor2> {
        self.net
            .head
            .forward_batch(&self.net.head_input(x_t, self.ctx, t)?)
    }
}

impl DifferentiablePredictor for ConditionedPolicy<'_> {
    type Cache = Trace;
    type Grads = HeadGrads;

    fn forward_cached(&self, x_t: &Tensor2, t: &[usize]) -> Result<(Tensor2, Trace)> {
        let trace = self.net.head.forward_trace(self.net.head_input(x_t, self.ctx, t)?)?;
        Ok((trace.output().clone(), trace))
    }

    fn backward_cached(&self, cache: Trace, grad_pred: Tensor2, grads: &mut HeadGrads) -> Result<()> {
        let gin = self.net.head.backward_trace(&cache, grad_pred, &mut grads.head);
        let c = self.net.context_dim();
        for i in 0..gin.rows() {
            for (dst, src) in grads.ctx.row_mut(i).iter_mut().zip(&gin.row(i)[ACTION_DIM..ACTION_DIM + c]) {
                *dst += src;
            }
        }
        Ok(())
    }
}
