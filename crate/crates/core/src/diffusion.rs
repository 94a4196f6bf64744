//! Conditional DDPM machinery: forward noising, direct-jump noising,
//! ancestral reverse sampling and the simplified noise-regression objective.

use serde::{Deserialize, Serialize};

use crate::error::{PamError, Result};
use crate::nn::Tensor2;
use crate::rng::Rng;

/// Serializable description of a schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// `alpha_t` for `t = 1..=T` with cumulative products `alpha_bar_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    config: Option<ScheduleConfig>,
}

impl NoiseSchedule {
    /// Linear beta schedule, `alpha_t = 1 - beta_t`.
    pub fn linear(cfg: ScheduleConfig) -> Result<Self> {
        if cfg.steps == 0 {
            return Err(PamError::config("schedule needs at least one step"));
        }
        let alphas = (0..cfg.steps)
            .map(|i| {
                let frac = if cfg.steps == 1 {
                    0.0
                } else {
                    i as f64 / (cfg.steps - 1) as f64
                };
                1.0 - (cfg.beta_start + frac * (cfg.beta_end - cfg.beta_start))
            })
            .collect();
        let mut s = Self::from_alphas(alphas)?;
        s.config = Some(cfg);
        Ok(s)
    }

    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(PamError::config("schedule needs at least one step"));
        }
        if let Some((i, a)) = alphas
            .iter()
            .enumerate()
            .find(|(_, &a)| !(a > 0.0 && a < 1.0))
        {
            return Err(PamError::config(format!(
                "alpha_{} = {a} outside (0, 1)",
                i + 1
            )));
        }
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut prod = 1.0;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        if alpha_bars.windows(2).any(|w| w[1] >= w[0]) {
            return Err(PamError::config("alpha_bar is not strictly decreasing"));
        }
        Ok(Self {
            alphas,
            alpha_bars,
            config: None,
        })
    }

    pub fn config(&self) -> Option<ScheduleConfig> {
        self.config
    }

    /// `T`.
    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(PamError::config(format!(
                "timestep {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn beta(&self, t: usize) -> f64 {
        1.0 - self.alphas[t - 1]
    }

    /// `alpha_bar_t`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Variance of `q(x_{t-1} | x_t, x_0)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    /// `ceil(fraction * T)`, at least 1.
    pub fn low_step_cutoff(&self, fraction: f64) -> usize {
        ((fraction * self.steps() as f64).ceil() as usize).clamp(1, self.steps())
    }
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(PamError::config(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// One forward noising step `x_t = sqrt(alpha_t) x_{t-1} + sqrt(1 - alpha_t) eps`.
pub fn q_step(schedule: &NoiseSchedule, x_prev: &[f64], t: usize, noise: &[f64]) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    check_dims(x_prev, noise)?;
    let a = schedule.alpha(t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(x_prev.iter().zip(noise).map(|(x, e)| sa * x + sn * e).collect())
}

/// Noising straight from `x_0`: `sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps`.
pub fn q_jump(schedule: &NoiseSchedule, x0: &[f64], t: usize, noise: &[f64]) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    check_dims(x0, noise)?;
    let ab = schedule.alpha_bar(t);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, e)| sa * x + sn * e).collect())
}

/// A noise-prediction network with its condition already bound.
///
/// Row `i` of `x_t` is denoised at timestep `t[i]`; rows never interact.
pub trait NoisePredictor {
    fn predict(&self, x_t: &Tensor2, t: &[usize]) -> Result<Tensor2>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&Tensor2, &[usize]) -> Result<Tensor2>,
{
    fn predict(&self, x_t: &Tensor2, t: &[usize]) -> Result<Tensor2> {
        self(x_t, t)
    }
}

/// A noise predictor that can also back-propagate into its parameters.
pub trait DifferentiablePredictor: NoisePredictor {
    type Cache;
    type Grads;

    fn forward_cached(&self, x_t: &Tensor2, t: &[usize]) -> Result<(Tensor2, Self::Cache)>;

    /// Accumulates gradients of `sum(prediction * grad_pred)` into `grads`.
    fn backward_cached(&self, cache: Self::Cache, grad_pred: Tensor2, grads: &mut Self::Grads) -> Result<()>;
}

/// One posterior-mean reverse update with fixed variance; `z` is ignored at `t = 1`.
pub fn reverse_step(schedule: &NoiseSchedule, x_t: &[f64], eps_hat: &[f64], t: usize, z: &[f64]) -> Vec<f64> {
    let alpha = schedule.alpha(t);
    let beta = schedule.beta(t);
    let coef = beta / (1.0 - schedule.alpha_bar(t)).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let sigma = if t > 1 {
        schedule.posterior_variance(t).sqrt()
    } else {
        0.0
    };
    x_t.iter()
        .zip(eps_hat)
        .zip(z)
        .map(|((x, e), n)| inv * (x - coef * e) + sigma * n)
        .collect()
}

/// Ancestral DDPM sampling of `rngs.len()` independent samples in one batch.
///
/// Sample `i` draws its initial noise and every per-step noise from `rngs[i]`
/// only. A sample that turns non-finite is dropped from further updates and
/// reported as an error naming the offending timestep; the others continue.
pub fn ddpm_sample_batch(
    schedule: &NoiseSchedule,
    eps_net: &impl NoisePredictor,
    dim: usize,
    rngs: &mut [Rng],
) -> Result<Vec<Result<Vec<f64>>>> {
    let n = rngs.len();
    let mut xs: Vec<Vec<f64>> = rngs.iter_mut().map(|r| r.normal_vec(dim)).collect();
    let mut failed: Vec<Option<usize>> = vec![None; n];
    for t in (1..=schedule.steps()).rev() {
        let mut batch = Tensor2::zeros(n, dim);
        for (i, x) in xs.iter().enumerate() {
            if failed[i].is_none() {
                batch.row_mut(i).copy_from_slice(x);
            }
        }
        let eps = eps_net.predict(&batch, &vec![t; n])?;
        if eps.rows() != n || eps.cols() != dim {
            return Err(PamError::config(format!(
                "noise predictor returned {}x{}, expected {n}x{dim}",
                eps.rows(),
                eps.cols()
            )));
        }
        for i in 0..n {
            if failed[i].is_some() {
                continue;
            }
            let z = if t > 1 {
                rngs[i].normal_vec(dim)
            } else {
                vec![0.0; dim]
            };
            let next = reverse_step(schedule, &xs[i], eps.row(i), t, &z);
            if next.iter().all(|v| v.is_finite()) {
                xs[i] = next;
            } else {
                failed[i] = Some(t);
            }
        }
    }
    Ok(xs
        .into_iter()
        .zip(failed)
        .map(|(x, f)| match f {
            None => Ok(x),
            Some(t) => Err(PamError::non_finite(format!("reverse diffusion step t={t}"))),
        })
        .collect())
}

/// Draws `x_0` from the model by iterating the reverse process from pure noise.
pub fn ddpm_sample(
    schedule: &NoiseSchedule,
    eps_net: &impl NoisePredictor,
    dim: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let mut rngs = [rng.clone()];
    let out = ddpm_sample_batch(schedule, eps_net, dim, &mut rngs)?;
    *rng = rngs[0].clone();
    out.into_iter().next().expect("one sample")
}

/// A training draw: timestep, injected noise and the resulting `x_t`.
#[derive(Clone, Debug)]
pub struct NoisedBatch {
    pub t: Vec<usize>,
    pub noise: Tensor2,
    pub x_t: Tensor2,
}

/// Per row: `t ~ U{lo..=hi}`, `eps ~ N(0, I)`, `x_t = q_jump(x_0, t, eps)`.
pub fn draw_noised(schedule: &NoiseSchedule, x0: &Tensor2, t_range: (usize, usize), rng: &mut Rng) -> Result<NoisedBatch> {
    let (lo, hi) = t_range;
    schedule.check_t(lo)?;
    schedule.check_t(hi)?;
    let (b, d) = (x0.rows(), x0.cols());
    let mut t = Vec::with_capacity(b);
    let mut noise = Tensor2::zeros(b, d);
    let mut x_t = Tensor2::zeros(b, d);
    for i in 0..b {
        let ti = rng.int_inclusive(lo, hi);
        let e = rng.normal_vec(d);
        let xt = q_jump(schedule, x0.row(i), ti, &e)?;
        noise.row_mut(i).copy_from_slice(&e);
        x_t.row_mut(i).copy_from_slice(&xt);
        t.push(ti);
    }
    Ok(NoisedBatch { t, noise, x_t })
}

/// Row-wise `||eps - eps_hat||^2`.
pub fn squared_errors(noise: &Tensor2, pred: &Tensor2) -> Vec<f64> {
    (0..noise.rows())
        .map(|i| {
            noise
                .row(i)
                .iter()
                .zip(pred.row(i))
                .map(|(e, p)| (e - p) * (e - p))
                .sum()
        })
        .collect()
}

/// Simplified objective `E ||eps - eps_theta(x_t, c, t)||^2`, averaged over
/// the rows of `x0` with one `(t, eps)` draw per row.
///
/// Parameter gradients of the returned loss are accumulated into `grads`.
pub fn l_simple<P: DifferentiablePredictor>(
    schedule: &NoiseSchedule,
    eps_net: &P,
    x0: &Tensor2,
    rng: &mut Rng,
    grads: &mut P::Grads,
) -> Result<f64> {
    if x0.rows() == 0 {
        return Ok(0.0);
    }
    let draw = draw_noised(schedule, x0, (1, schedule.steps()), rng)?;
    let (pred, cache) = eps_net.forward_cached(&draw.x_t, &draw.t)?;
    let b = x0.rows() as f64;
    let loss = squared_errors(&draw.noise, &pred).iter().sum::<f64>() / b;
    let mut gp = Tensor2::zeros(pred.rows(), pred.cols());
    for ((g, e), p) in gp.data_mut().iter_mut().zip(draw.noise.data()).zip(pred.data()) {
        *g = -2.0 * (e - p) / b;
    }
    eps_net.backward_cached(cache, gp, grads)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_schedule() -> NoiseSchedule {
        NoiseSchedule::linear(ScheduleConfig::default()).unwrap()
    }

    #[test]
    fn schedule_invariants() {
        let s = default_schedule();
        assert_eq!(s.steps(), 100);
        let mut prod = 1.0;
        for t in 1..=s.steps() {
            let a = s.alpha(t);
            assert!(a > 0.0 && a < 1.0);
            prod *= a;
            assert!((s.alpha_bar(t) - prod).abs() < 1e-12);
            if t > 1 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
        assert_eq!(s.low_step_cutoff(0.1), 10);
    }

    #[test]
    fn rejects_bad_alphas() {
        assert!(NoiseSchedule::from_alphas(vec![0.9, 1.0]).is_err());
        assert!(NoiseSchedule::from_alphas(vec![0.0]).is_err());
        assert!(NoiseSchedule::from_alphas(vec![]).is_err());
    }

    #[test]
    fn q_step_identity_limit() {
        let s = NoiseSchedule::from_alphas(vec![1.0 - 1e-12]).unwrap();
        let x = [0.3, -0.7];
        let out = q_step(&s, &x, 1, &[1.0, 1.0]).unwrap();
        for (o, v) in out.iter().zip(&x) {
            assert!((o - v).abs() < 1e-6);
        }
    }

    #[test]
    fn q_step_zero_input() {
        let s = default_schedule();
        let out = q_step(&s, &[0.0, 0.0], 50, &[1.0, 0.0]).unwrap();
        assert!((out[0] - (1.0 - s.alpha(50)).sqrt()).abs() < 1e-15);
        assert_eq!(out[1], 0.0);
    }

    #[test]
    fn q_jump_special_cases() {
        let s = default_schedule();
        let x0 = [0.5, -1.0];
        let shrunk = q_jump(&s, &x0, 30, &[0.0, 0.0]).unwrap();
        let k = s.alpha_bar(30).sqrt();
        assert!((shrunk[0] - 0.5 * k).abs() < 1e-15);
        let noise_only = q_jump(&s, &[0.0, 0.0], 30, &[2.0, 1.0]).unwrap();
        assert!((noise_only[0] - 2.0 * (1.0 - s.alpha_bar(30)).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn timestep_out_of_range() {
        let s = default_schedule();
        assert!(q_step(&s, &[0.0], 0, &[0.0]).is_err());
        assert!(q_jump(&s, &[0.0], 101, &[0.0]).is_err());
    }

    #[test]
    fn q_jump_at_t_max_is_near_standard_normal() {
        let s = default_schedule();
        let mut rng = Rng::new(4);
        let n = 10_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let x0 = rng.normal();
                let e = rng.normal();
                q_jump(&s, &[x0], 100, &[e]).unwrap()[0]
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn zero_predictor_sample_matches_reference_loop() {
        let s = NoiseSchedule::from_alphas(vec![0.999, 0.998, 0.997, 0.996]).unwrap();
        let zero = |x: &Tensor2, _t: &[usize]| Ok(Tensor2::zeros(x.rows(), x.cols()));
        let mut rng = Rng::new(10);
        let out = ddpm_sample(&s, &zero, 3, &mut rng).unwrap();

        // Hand-rolled reference loop on an identical stream.
        let mut r = Rng::new(10);
        let mut x: Vec<f64> = (0..3).map(|_| r.normal()).collect();
        for t in (1..=4).rev() {
            let a: f64 = s.alphas()[t - 1];
            let ab = s.alpha_bars()[t - 1];
            let ab_prev = if t > 1 { s.alpha_bars()[t - 2] } else { 1.0 };
            let var = (1.0 - a) * (1.0 - ab_prev) / (1.0 - ab);
            let zs: Vec<f64> = if t > 1 {
                (0..3).map(|_| r.normal()).collect()
            } else {
                vec![0.0; 3]
            };
            for i in 0..3 {
                x[i] = x[i] / a.sqrt() + var.sqrt() * zs[i];
            }
        }
        for (a, b) in out.iter().zip(&x) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = default_schedule();
        let net = |x: &Tensor2, _t: &[usize]| {
            let mut y = x.clone();
            y.data_mut().iter_mut().for_each(|v| *v *= 0.1);
            Ok(y)
        };
        let a = ddpm_sample(&s, &net, 4, &mut Rng::new(8)).unwrap();
        let b = ddpm_sample(&s, &net, 4, &mut Rng::new(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_sample_reports_timestep() {
        let s = default_schedule();
        let net = |x: &Tensor2, t: &[usize]| {
            let mut y = Tensor2::zeros(x.rows(), x.cols());
            if t[0] == 37 {
                y.data_mut()[0] = f64::INFINITY;
            }
            Ok(y)
        };
        let mut rngs = vec![Rng::new(1), Rng::new(2)];
        let out = ddpm_sample_batch(&s, &net, 2, &mut rngs).unwrap();
        let msg = out[0].as_ref().unwrap_err().to_string();
        assert!(msg.contains("t=37"), "{msg}");
        assert!(out[1].is_ok());
    }

    #[test]
    fn oracle_predictor_has_zero_loss() {
        // A predictor that reads back the true noise from x_t given the known x_0.
        struct Exact<'a> {
            s: &'a NoiseSchedule,
            x0: Vec<f64>,
        }
        impl NoisePredictor for Exact<'_> {
            fn predict(&self, x_t: &Tensor2, t: &[usize]) -> Result<Tensor2> {
                let mut out = Tensor2::zeros(x_t.rows(), x_t.cols());
                for i in 0..x_t.rows() {
                    let ab = self.s.alpha_bar(t[i]);
                    for j in 0..x_t.cols() {
                        let v = (x_t.get(i, j) - ab.sqrt() * self.x0[j]) / (1.0 - ab).sqrt();
                        out.set(i, j, v);
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
        let s = default_schedule();
        let x0 = vec![0.2, -0.4, 0.9, 0.0];
        let net = Exact { s: &s, x0: x0.clone() };
        let batch = Tensor2::from_rows(&[x0.clone(), x0]).unwrap();
        let loss = l_simple(&s, &net, &batch, &mut Rng::new(3), &mut ()).unwrap();
        assert!(loss < 1e-18, "{loss}");
    }

    #[test]
    fn zero_predictor_loss_is_dimension() {
        struct Zero;
        impl NoisePredictor for Zero {
            fn predict(&self, x: &Tensor2, _: &[usize]) -> Result<Tensor2> {
                Ok(Tensor2::zeros(x.rows(), x.cols()))
            }
        }
        impl DifferentiablePredictor for Zero {
            type Cache = ();
            type Grads = ();
            fn forward_cached(&self, x: &Tensor2, t: &[usize]) -> Result<(Tensor2, ())> {
                Ok((self.predict(x, t)?, ()))
            }
            fn backward_cached(&self, _: (), _: Tensor2, _: &mut ()) -> Result<()> {
                Ok(())
            }
        }
        let s = default_schedule();
        let x0 = Tensor2::zeros(10_000, 4);
        let loss = l_simple(&s, &Zero, &x0, &mut Rng::new(12), &mut ()).unwrap();
        assert!((loss - 4.0).abs() < 0.2, "{loss}");
    }
}
