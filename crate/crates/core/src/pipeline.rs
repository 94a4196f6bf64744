//! Stage orchestration over on-disk artifacts: data collection, training,
//! stage-2 rollout, evaluation and plot data.
//!
//! Every stage is deterministic per seed. Random streams are keyed by
//! purpose so collection, rollout, evaluation and held-out draws never share
//! reset states even under the same seed.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, ScheduleConfig};
use crate::envs::{Env, EnvState, QualityMetrics, Task, GRID};
use crate::error::{PamError, Result};
use crate::oracle::{aux_actions, expert_action, oracle_rank, post_step_emd, OracleRanking};
use crate::policy::{
    train_supervised, ActionPrimitive, PointSet, PolicyArch, PolicyNet, SlSample, SupervisedConfig,
};
use crate::preference::{train_dpo, train_explicit_reward, DpoConfig, ExplicitConfig, PreferencePair, RewardHead};
use crate::ras::{infer_with_ras, spearman, ExplicitReward, ImplicitReward, InferenceRecord, RewardModel};
use crate::rng::Rng;
use crate::store::{
    append_record, file_hash, load_dataset, load_policy, load_reward_head, manifest_path, repair_tail, save_policy,
    save_reward_head, CheckpointHeader, PlRecord, Role, RunManifest, SlRecord,
};

/// Minimum per-step EMD improvement that counts as progress.
pub const EARLY_STOP_DELTA: f64 = 1e-3;
/// Consecutive non-improving steps that end an episode.
pub const EARLY_STOP_PATIENCE: usize = 3;
/// Hidden width of the explicit reward head.
pub const REWARD_HEAD_HIDDEN: usize = 128;

const STREAM_COLLECT: u64 = 1;
const STREAM_ROLLOUT: u64 = 2;
const STREAM_EVAL: u64 = 3;
const STREAM_HELDOUT: u64 = 4;

/// Tracks the early-stop rule over a sequence of EMD values.
#[derive(Clone, Debug)]
pub struct EarlyStop {
    last: f64,
    stalls: usize,
}

impl EarlyStop {
    pub fn new(initial_emd: f64) -> Self {
        Self {
            last: initial_emd,
            stalls: 0,
        }
    }

    /// Feeds the EMD after a step; true once the episode should end.
    pub fn update(&mut self, emd: f64) -> bool {
        if self.last - emd < EARLY_STOP_DELTA {
            self.stalls += 1;
        } else {
            self.stalls = 0;
        }
        self.last = emd;
        self.stalls >= EARLY_STOP_PATIENCE
    }
}

/// Number of steps executed before the rule fires on `emds` (initial value
/// first), or `None` if it never fires.
pub fn early_stop_step(emds: &[f64]) -> Option<usize> {
    let (first, rest) = emds.split_first()?;
    let mut stop = EarlyStop::new(*first);
    rest.iter().position(|&e| stop.update(e)).map(|i| i + 1)
}

fn fresh_output(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(e.into()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectConfig {
    pub task: Task,
    pub num_states: usize,
    pub k: usize,
    pub seed: u64,
}

/// Stage 1: the scripted expert runs episodes, and every visited state is
/// stored with its optimal action and `k` auxiliary actions.
pub fn collect_stage1(cfg: &CollectConfig, out: &Path) -> Result<usize> {
    if cfg.num_states == 0 {
        return Err(PamError::config("--n must be at least 1"));
    }
    fresh_output(out)?;
    let env = Env::standard(cfg.task);
    let root = Rng::new(cfg.seed).derive(&[STREAM_COLLECT]);
    let max_steps = cfg.task.default_max_steps();
    let mut written = 0usize;
    let mut episode = 0u64;
    while written < cfg.num_states {
        let erng = root.derive(&[episode]);
        let mut state = env.reset(&mut erng.derive(&[0]));
        let mut stop = EarlyStop::new(env.emd(&state));
        for step in 0..max_steps {
            let a0 = expert_action(&env, &state)?;
            let aux = aux_actions(&env, &state, cfg.k, &mut erng.derive(&[1, step as u64]))?;
            let rec = SlRecord::new(cfg.task, episode, step as u32, state.observe(), a0, aux);
            rec.validate_with(cfg.k)?;
            append_record(out, &rec)?;
            written += 1;
            if written == cfg.num_states {
                break;
            }
            state = env.step(&state, &a0, Some(&mut erng.derive(&[2, step as u64])))?;
            if stop.update(env.emd(&state)) {
                break;
            }
        }
        episode += 1;
    }
    let mut m = RunManifest::new(cfg.task, "collect")
        .seed("collect", cfg.seed)
        .param("num_states", cfg.num_states)
        .param("k", cfg.k)
        .param("max_steps", max_steps)
        .param("episodes", episode);
    m.output(out)?;
    m.save(&manifest_path(out))?;
    log::info!("collected {written} states over {episode} episodes into {}", out.display());
    Ok(written)
}

fn check_task<'a>(task: Task, found: impl IntoIterator<Item = &'a Task>, what: &str) -> Result<()> {
    for t in found {
        if *t != task {
            return Err(PamError::config(format!("{what} holds {t} data, expected {task}")));
        }
    }
    Ok(())
}

/// Supervised samples: every stage-1 target, plus each stage-2 annotated
/// optimal action as a single-target sample.
pub fn sl_samples(sl: &[SlRecord], extra: &[PlRecord]) -> Vec<SlSample> {
    let mut out: Vec<SlSample> = sl
        .iter()
        .map(|r| SlSample {
            obs: r.obs.clone(),
            actions: r.actions(),
        })
        .collect();
    out.extend(extra.iter().map(|r| SlSample {
        obs: r.obs.clone(),
        actions: vec![r.ranking.optimal_action],
    }));
    out
}

pub struct TrainSlInputs<'a> {
    pub task: Task,
    pub sl: &'a Path,
    /// Stage-2 file whose annotated optimal actions join the data (SL+SL).
    pub pl: Option<&'a Path>,
}

fn loss_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".loss.json");
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Trains a reference policy from scratch; writes the checkpoint, its loss
/// curve and a manifest.
pub fn train_sl_stage(inputs: &TrainSlInputs<'_>, cfg: &SupervisedConfig, seed: u64, out: &Path) -> Result<Vec<f64>> {
    let sl: Vec<SlRecord> = load_dataset(inputs.sl)?;
    check_task(inputs.task, sl.iter().map(|r| &r.task), "stage-1 dataset")?;
    let pl: Vec<PlRecord> = match inputs.pl {
        Some(p) => load_dataset(p)?,
        None => Vec::new(),
    };
    check_task(inputs.task, pl.iter().map(|r| &r.task), "stage-2 dataset")?;
    let data = sl_samples(&sl, &pl);
    let schedule_cfg = ScheduleConfig::default();
    let schedule = NoiseSchedule::linear(schedule_cfg)?;
    let root = Rng::new(seed);
    let mut net = PolicyNet::new(&PolicyArch::standard(schedule.steps()), &mut root.derive(&[0]))?;
    let curve = train_supervised(&mut net, &schedule, &data, cfg, &root.derive(&[1]))?;
    save_policy(out, &net, Role::Reference, inputs.task, seed, schedule_cfg)?;
    let lp = loss_path(out);
    write_json(&lp, &curve)?;
    let stage = if inputs.pl.is_some() { "train-sl-sl" } else { "train-sl" };
    let mut m = RunManifest::new(inputs.task, stage)
        .seed("train", seed)
        .param("epochs", cfg.epochs)
        .param("lr", cfg.lr)
        .param("draws_per_target", cfg.draws_per_target)
        .param("steps", schedule_cfg.steps)
        .param("beta_start", schedule_cfg.beta_start)
        .param("beta_end", schedule_cfg.beta_end)
        .param("arch", net.arch())
        .param("samples", data.len())
        .param("stage2_optimal_included", inputs.pl.is_some())
        .input(inputs.sl)?;
    if let Some(p) = inputs.pl {
        m = m.input(p)?;
    }
    m.output(out)?;
    m.output(&lp)?;
    m.save(&manifest_path(out))?;
    Ok(curve)
}

/// A state handed to whoever ranks the candidates.
pub struct AnnotationRequest<'a> {
    pub task: Task,
    pub episode: u64,
    pub step: u32,
    pub obs: &'a PointSet,
    pub candidates: &'a [ActionPrimitive],
    pub state: &'a EnvState,
}

/// Source of stage-2 rankings. `Ok(None)` means no ranking is available
/// right now; the rollout then stops cleanly and can be resumed.
pub trait Annotator {
    fn annotate(&mut self, req: &AnnotationRequest<'_>) -> Result<Option<OracleRanking>>;
}

/// Synthetic annotator backed by the one-step EMD oracle.
pub struct OracleAnnotator {
    pub env: Env,
}

impl Annotator for OracleAnnotator {
    fn annotate(&mut self, req: &AnnotationRequest<'_>) -> Result<Option<OracleRanking>> {
        Ok(Some(oracle_rank(&self.env, req.state, req.candidates)?.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub task: Task,
    pub num_states: usize,
    pub n: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutSummary {
    /// Records appended by this invocation.
    pub written: usize,
    /// Records in the file afterwards.
    pub total: usize,
    pub complete: bool,
}

/// Stage 2: the reference policy proposes `n` candidates per state, the
/// annotator ranks them, and the annotated optimal action is executed.
///
/// Appends to `out`. Records already present are replayed (their optimal
/// actions re-executed under the same keyed noise) so an interrupted run
/// continues exactly where it stopped.
pub fn rollout_stage2(
    cfg: &RolloutConfig,
    reference: &PolicyNet,
    schedule: &NoiseSchedule,
    annotator: &mut dyn Annotator,
    out: &Path,
) -> Result<RolloutSummary> {
    if cfg.num_states == 0 || cfg.n == 0 {
        return Err(PamError::config("rollout needs --n-states >= 1 and --n >= 1"));
    }
    reference.check_schedule(schedule)?;
    repair_tail(out)?;
    let existing: Vec<PlRecord> = if out.exists() { load_dataset(out)? } else { Vec::new() };
    check_task(cfg.task, existing.iter().map(|r| &r.task), "stage-2 dataset")?;
    if existing.len() > cfg.num_states {
        return Err(PamError::config(format!(
            "{} already holds {} records, more than the requested {}",
            out.display(),
            existing.len(),
            cfg.num_states
        )));
    }
    let env = Env::standard(cfg.task);
    let kind = cfg.task.action_kind();
    let root = Rng::new(cfg.seed).derive(&[STREAM_ROLLOUT]);
    let max_steps = cfg.task.default_max_steps();
    let mut index = 0usize;
    let mut written = 0usize;
    let mut episode = 0u64;
    let mut complete = true;
    'episodes: while index < cfg.num_states {
        let erng = root.derive(&[episode]);
        let mut state = env.reset(&mut erng.derive(&[0]));
        let mut stop = EarlyStop::new(env.emd(&state));
        for step in 0..max_steps {
            let a0 = if let Some(rec) = existing.get(index) {
                if rec.episode != episode || rec.step != step as u32 {
                    return Err(PamError::Corrupt {
                        path: out.to_path_buf(),
                        line: index + 1,
                        message: format!(
                            "record is episode {} step {}, replay expected episode {episode} step {step}",
                            rec.episode, rec.step
                        ),
                    });
                }
                if rec.obs != state.observe() {
                    return Err(PamError::Corrupt {
                        path: out.to_path_buf(),
                        line: index + 1,
                        message: "observation differs from the replayed state; wrong seed or task?".into(),
                    });
                }
                rec.ranking.optimal_action
            } else {
                let obs = state.observe();
                let candidates =
                    reference.predict_actions(schedule, &obs, kind, cfg.n, &erng.derive(&[1, step as u64]))?;
                let req = AnnotationRequest {
                    task: cfg.task,
                    episode,
                    step: step as u32,
                    obs: &obs,
                    candidates: &candidates,
                    state: &state,
                };
                let Some(ranking) = annotator.annotate(&req)? else {
                    log::warn!("annotations unavailable; stopping after {index} states (resumable)");
                    complete = false;
                    break 'episodes;
                };
                let rec = PlRecord::new(cfg.task, episode, step as u32, obs, candidates, ranking);
                rec.validate_with(cfg.n)?;
                append_record(out, &rec)?;
                written += 1;
                rec.ranking.optimal_action
            };
            index += 1;
            if index == cfg.num_states {
                break;
            }
            state = env.step(&state, &a0, Some(&mut erng.derive(&[2, step as u64])))?;
            if stop.update(env.emd(&state)) {
                break;
            }
        }
        episode += 1;
    }
    Ok(RolloutSummary {
        written,
        total: existing.len() + written,
        complete,
    })
}

/// Writes the stage-2 manifest once the file is complete.
pub fn write_rollout_manifest(cfg: &RolloutConfig, reference: &Path, source: &str, out: &Path) -> Result<()> {
    let mut m = RunManifest::new(cfg.task, "rollout")
        .seed("rollout", cfg.seed)
        .param("num_states", cfg.num_states)
        .param("n", cfg.n)
        .param("source", source)
        .param("executed_action", "annotated optimal")
        .input(reference)?;
    m.output(out)?;
    m.save(&manifest_path(out))
}

/// Loads a reference checkpoint for `task` with its noise schedule.
pub fn load_reference(path: &Path, task: Task) -> Result<(PolicyNet, NoiseSchedule, CheckpointHeader)> {
    let (net, header) = load_policy(path, Role::Reference)?;
    if header.task != task {
        return Err(PamError::config(format!(
            "{} was trained for {}, not {task}",
            path.display(),
            header.task
        )));
    }
    let schedule = NoiseSchedule::linear(header.schedule)?;
    net.check_schedule(&schedule)?;
    Ok((net, schedule, header))
}

fn preference_pairs(task: Task, pl: &Path) -> Result<Vec<PreferencePair>> {
    let records: Vec<PlRecord> = load_dataset(pl)?;
    check_task(task, records.iter().map(|r| &r.task), "stage-2 dataset")?;
    Ok(records.iter().flat_map(|r| r.pairs()).collect())
}

/// Preference finetuning of a copy of the reference policy.
pub fn train_dpo_stage(task: Task, pl: &Path, reference: &Path, cfg: &DpoConfig, seed: u64, out: &Path) -> Result<Vec<f64>> {
    let (ref_net, schedule, header) = load_reference(reference, task)?;
    let pairs = preference_pairs(task, pl)?;
    let (fine, curve) = train_dpo(&ref_net, &schedule, &pairs, cfg, &Rng::new(seed))?;
    save_policy(out, &fine, Role::Finetuned, task, seed, header.schedule)?;
    let lp = loss_path(out);
    write_json(&lp, &curve)?;
    let mut m = RunManifest::new(task, "train-dpo")
        .seed("train", seed)
        .param("beta", cfg.beta)
        .param("epochs", cfg.epochs)
        .param("lr", cfg.lr)
        .param("batch_size", cfg.batch_size)
        .param("weighted", cfg.weighted)
        .param("pairs", pairs.len())
        .param("steps", header.schedule.steps)
        .input(pl)?
        .input(reference)?;
    m.output(out)?;
    m.output(&lp)?;
    m.save(&manifest_path(out))?;
    Ok(curve)
}

/// Bradley-Terry reward head on the frozen reference encoder.
pub fn train_explicit_stage(
    task: Task,
    pl: &Path,
    reference: &Path,
    cfg: &ExplicitConfig,
    seed: u64,
    out: &Path,
) -> Result<Vec<f64>> {
    let (ref_net, _, header) = load_reference(reference, task)?;
    let pairs = preference_pairs(task, pl)?;
    let root = Rng::new(seed);
    let mut head = RewardHead::new(ref_net.context_dim(), REWARD_HEAD_HIDDEN, &mut root.derive(&[0]))?;
    let curve = train_explicit_reward(&ref_net, &mut head, &pairs, cfg, &root.derive(&[1]))?;
    save_reward_head(out, &head, task, seed, header.schedule)?;
    let lp = loss_path(out);
    write_json(&lp, &curve)?;
    let mut m = RunManifest::new(task, "train-explicit")
        .seed("train", seed)
        .param("epochs", cfg.epochs)
        .param("lr", cfg.lr)
        .param("batch_size", cfg.batch_size)
        .param("weighted", cfg.weighted)
        .param("hidden", REWARD_HEAD_HIDDEN)
        .param("pairs", pairs.len())
        .input(pl)?
        .input(reference)?;
    m.output(out)?;
    m.output(&lp)?;
    m.save(&manifest_path(out))?;
    Ok(curve)
}

/// The five compared methods.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "SL")]
    Sl,
    #[serde(rename = "SL+SL")]
    SlSl,
    #[serde(rename = "DPO+ImplicitRAS")]
    DpoImplicitRas,
    #[serde(rename = "SL+ExplicitRAS")]
    SlExplicitRas,
    #[serde(rename = "SL+ImplicitRAS")]
    SlImplicitRas,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Sl,
        Method::SlSl,
        Method::DpoImplicitRas,
        Method::SlExplicitRas,
        Method::SlImplicitRas,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Sl => "SL",
            Method::SlSl => "SL+SL",
            Method::DpoImplicitRas => "DPO+ImplicitRAS",
            Method::SlExplicitRas => "SL+ExplicitRAS",
            Method::SlImplicitRas => "SL+ImplicitRAS",
        }
    }

    /// Whether the method scores several candidates per state.
    pub fn selects(self) -> bool {
        matches!(self, Method::DpoImplicitRas | Method::SlExplicitRas | Method::SlImplicitRas)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = PamError;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let tags: Vec<&str> = Method::ALL.iter().map(|m| m.tag()).collect();
                PamError::config(format!("unknown method {s:?}; expected one of {}", tags.join(", ")))
            })
    }
}

/// Networks available to evaluation.
#[derive(Debug)]
pub struct Models {
    pub schedule: NoiseSchedule,
    pub reference: PolicyNet,
    pub sl_sl: Option<PolicyNet>,
    pub finetuned: Option<PolicyNet>,
    pub reward_head: Option<RewardHead>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub trials: usize,
    pub n: usize,
    pub max_steps: usize,
    pub beta: f64,
    pub seed: u64,
}

impl EvalConfig {
    pub fn standard(task: Task, seed: u64) -> Self {
        Self {
            trials: 20,
            n: 8,
            max_steps: task.default_max_steps(),
            beta: DpoConfig::default().beta,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub steps_executed: usize,
    /// Metrics after each executed step, initial state first.
    pub metrics: Vec<QualityMetrics>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCurve {
    pub method: Method,
    pub task: Task,
    pub trials: usize,
    pub failed: usize,
    pub max_steps: usize,
    pub n: usize,
    pub iou_mean: Vec<f64>,
    pub iou_std: Vec<f64>,
    pub coverage_mean: Vec<f64>,
    pub coverage_std: Vec<f64>,
    pub emd_mean: Vec<f64>,
    pub emd_std: Vec<f64>,
    /// Final EMD per trial; `None` for failed trials.
    pub final_emd: Vec<Option<f64>>,
}

impl EvalCurve {
    pub fn final_emd_mean(&self) -> f64 {
        *self.emd_mean.last().expect("curve has step 0")
    }
}

pub struct EvalReport {
    pub curve: EvalCurve,
    pub trials: Vec<TrialResult>,
    /// Final-state occupancy counts over successful trials, row-major.
    pub heatmap: Vec<u32>,
    pub inference: Vec<InferenceRecord>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn method_networks<'a>(method: Method, models: &'a Models) -> Result<(&'a PolicyNet, Option<Box<dyn RewardModel + 'a>>, f64)> {
    let need = |o: Option<&'a PolicyNet>, what: &str| {
        o.ok_or_else(|| PamError::config(format!("method {method} needs a {what} checkpoint")))
    };
    Ok(match method {
        Method::Sl => (&models.reference, None, 0.0),
        Method::SlSl => (need(models.sl_sl.as_ref(), "SL+SL reference")?, None, 0.0),
        Method::DpoImplicitRas | Method::SlImplicitRas => {
            let fine = need(models.finetuned.as_ref(), "finetuned")?;
            let sampler = if method == Method::DpoImplicitRas { fine } else { &models.reference };
            (sampler, None, 1.0)
        }
        Method::SlExplicitRas => {
            let head = models
                .reward_head
                .as_ref()
                .ok_or_else(|| PamError::config(format!("method {method} needs an explicit-reward checkpoint")))?;
            let model: Box<dyn RewardModel> = Box::new(ExplicitReward {
                reference: &models.reference,
                head,
            });
            (&models.reference, Some(model), 0.0)
        }
    })
}

fn run_trial(
    env: &Env,
    method: Method,
    sampler: &PolicyNet,
    model: Option<&dyn RewardModel>,
    models: &Models,
    cfg: &EvalConfig,
    trial: usize,
    log: &mut Vec<InferenceRecord>,
) -> Result<(EnvState, Vec<QualityMetrics>, usize)> {
    let task = env.task;
    let kind = task.action_kind();
    let trng = Rng::new(cfg.seed).derive(&[STREAM_EVAL, trial as u64]);
    let mut state = env.reset(&mut trng.derive(&[0]));
    let mut metrics = vec![env.measure(&state)];
    let mut stop = EarlyStop::new(metrics[0].emd);
    let episode = format!("trial{trial}");
    let mut executed = 0;
    for step in 0..cfg.max_steps {
        let obs = state.observe();
        let prng = trng.derive(&[1, step as u64]);
        let action = match model {
            Some(m) if method.selects() => {
                let (best, all) = infer_with_ras(&models.schedule, sampler, m, &obs, kind, cfg.n, &prng)?;
                log.push(InferenceRecord::new(&episode, step, &all, best.source_index));
                best.action
            }
            _ => sampler.predict_actions(&models.schedule, &obs, kind, 1, &prng.derive(&[0]))?[0],
        };
        state = env.step(&state, &action, Some(&mut trng.derive(&[2, step as u64])))?;
        executed += 1;
        let m = env.measure(&state);
        metrics.push(m);
        if stop.update(m.emd) {
            break;
        }
    }
    Ok((state, metrics, executed))
}

/// Runs `cfg.trials` seeded episodes of `method`. Trial `i` uses the same
/// reset and transition noise for every method, so trials pair up across
/// methods. An erroring trial is recorded as failed.
pub fn evaluate(task: Task, method: Method, models: &Models, cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.trials == 0 {
        return Err(PamError::config("--trials must be at least 1"));
    }
    if cfg.n == 0 {
        return Err(PamError::config("--n must be at least 1"));
    }
    let env = Env::standard(task);
    let (sampler, explicit, implicit_flag) = method_networks(method, models)?;
    let implicit = if implicit_flag > 0.0 {
        let fine = models.finetuned.as_ref().expect("checked above");
        Some(ImplicitReward::new(&models.schedule, fine, &models.reference, cfg.beta)?)
    } else {
        None
    };
    let model: Option<&dyn RewardModel> = match (&implicit, &explicit) {
        (Some(m), _) => Some(m),
        (None, Some(m)) => Some(m.as_ref()),
        (None, None) => None,
    };
    let mut trials = Vec::with_capacity(cfg.trials);
    let mut heatmap = vec![0u32; GRID * GRID];
    let mut inference = Vec::new();
    for trial in 0..cfg.trials {
        let mut log = Vec::new();
        match run_trial(&env, method, sampler, model, models, cfg, trial, &mut log) {
            Ok((state, metrics, executed)) => {
                for (h, c) in heatmap.iter_mut().zip(state.rasterize().to_counts()) {
                    *h += c;
                }
                inference.extend(log);
                trials.push(TrialResult {
                    trial,
                    steps_executed: executed,
                    metrics,
                    error: None,
                });
            }
            Err(e) => {
                log::warn!("{method} trial {trial} failed: {e}");
                trials.push(TrialResult {
                    trial,
                    steps_executed: 0,
                    metrics: Vec::new(),
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let ok: Vec<&TrialResult> = trials.iter().filter(|t| t.error.is_none()).collect();
    if ok.is_empty() {
        return Err(PamError::invariant(format!("every {method} trial failed")));
    }
    // Stopped trials hold their final metrics for the remaining steps.
    let at = |t: &TrialResult, s: usize| t.metrics[s.min(t.metrics.len() - 1)];
    let len = cfg.max_steps + 1;
    let mut curve = EvalCurve {
        method,
        task,
        trials: cfg.trials,
        failed: trials.len() - ok.len(),
        max_steps: cfg.max_steps,
        n: if method.selects() { cfg.n } else { 1 },
        iou_mean: Vec::with_capacity(len),
        iou_std: Vec::with_capacity(len),
        coverage_mean: Vec::with_capacity(len),
        coverage_std: Vec::with_capacity(len),
        emd_mean: Vec::with_capacity(len),
        emd_std: Vec::with_capacity(len),
        final_emd: trials
            .iter()
            .map(|t| t.metrics.last().filter(|_| t.error.is_none()).map(|m| m.emd))
            .collect(),
    };
    for s in 0..len {
        let column = |f: fn(&QualityMetrics) -> f64| ok.iter().map(|t| f(&at(t, s))).collect::<Vec<f64>>();
        let (m, d) = mean_std(&column(|q| q.iou));
        curve.iou_mean.push(m);
        curve.iou_std.push(d);
        let (m, d) = mean_std(&column(|q| q.coverage));
        curve.coverage_mean.push(m);
        curve.coverage_std.push(d);
        let (m, d) = mean_std(&column(|q| q.emd));
        curve.emd_mean.push(m);
        curve.emd_std.push(d);
    }
    Ok(EvalReport {
        curve,
        trials,
        heatmap,
        inference,
    })
}

/// Checkpoints an evaluation may draw on.
#[derive(Clone, Debug, Default)]
pub struct CheckpointPaths {
    pub reference: Option<PathBuf>,
    pub sl_sl: Option<PathBuf>,
    pub finetuned: Option<PathBuf>,
    pub reward_head: Option<PathBuf>,
}

/// Loads what `method` needs, checking roles, task and schedule agreement.
pub fn load_models(task: Task, method: Method, paths: &CheckpointPaths) -> Result<Models> {
    let reference_path = paths
        .reference
        .as_ref()
        .ok_or_else(|| PamError::config("evaluation needs --reference"))?;
    let (reference, schedule, header) = load_reference(reference_path, task)?;
    let same_schedule = |h: &CheckpointHeader, p: &Path| {
        if h.task != task {
            return Err(PamError::config(format!("{} was trained for {}, not {task}", p.display(), h.task)));
        }
        if h.schedule != header.schedule {
            return Err(PamError::config(format!("{} uses a different noise schedule", p.display())));
        }
        Ok(())
    };
    let required = |p: &Option<PathBuf>, flag: &str| {
        p.clone()
            .ok_or_else(|| PamError::config(format!("method {method} needs {flag}")))
    };
    let mut models = Models {
        schedule,
        reference,
        sl_sl: None,
        finetuned: None,
        reward_head: None,
    };
    match method {
        Method::Sl => {}
        Method::SlSl => {
            let p = required(&paths.sl_sl, "--sl-sl")?;
            let (net, h) = load_policy(&p, Role::Reference)?;
            same_schedule(&h, &p)?;
            models.sl_sl = Some(net);
        }
        Method::DpoImplicitRas | Method::SlImplicitRas => {
            let p = required(&paths.finetuned, "--finetuned")?;
            let (net, h) = load_policy(&p, Role::Finetuned)?;
            same_schedule(&h, &p)?;
            if net.arch() != models.reference.arch() {
                return Err(PamError::config("finetuned and reference architectures differ"));
            }
            models.finetuned = Some(net);
        }
        Method::SlExplicitRas => {
            let p = required(&paths.reward_head, "--reward-head")?;
            let (head, h) = load_reward_head(&p)?;
            same_schedule(&h, &p)?;
            models.reward_head = Some(head);
        }
    }
    Ok(models)
}

fn curve_rows(curve: &EvalCurve) -> Vec<[f64; 7]> {
    (0..curve.emd_mean.len())
        .map(|s| {
            [
                s as f64,
                curve.iou_mean[s],
                curve.iou_std[s],
                curve.coverage_mean[s],
                curve.coverage_std[s],
                curve.emd_mean[s],
                curve.emd_std[s],
            ]
        })
        .collect()
}

const CURVE_COLUMNS: [&str; 7] = [
    "step",
    "iou_mean",
    "iou_std",
    "coverage_mean",
    "coverage_std",
    "emd_mean",
    "emd_std",
];

/// Writes the curve as CSV, one row per step.
pub fn write_curve_csv(curve: &EvalCurve, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(CURVE_COLUMNS).map_err(csv_err)?;
    for row in curve_rows(curve) {
        let mut fields = vec![(row[0] as usize).to_string()];
        fields.extend(row[1..].iter().map(|v| v.to_string()));
        w.write_record(&fields).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> PamError {
    PamError::Io(std::io::Error::other(e.to_string()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Evaluation output file names inside the output directory.
pub mod eval_files {
    pub const CURVE: &str = "curve.json";
    pub const CURVE_CSV: &str = "curve.csv";
    pub const TRIALS: &str = "trials.jsonl";
    pub const HEATMAP: &str = "heatmap.csv";
    pub const INFERENCE: &str = "inference.jsonl";
    pub const MANIFEST: &str = "manifest.json";
}

/// Loads models, evaluates and writes every output into `out_dir`.
pub fn eval_stage(task: Task, method: Method, paths: &CheckpointPaths, cfg: &EvalConfig, out_dir: &Path) -> Result<EvalReport> {
    let models = load_models(task, method, paths)?;
    let report = evaluate(task, method, &models, cfg)?;
    fs::create_dir_all(out_dir)?;
    let files: Vec<PathBuf> = [
        eval_files::CURVE,
        eval_files::CURVE_CSV,
        eval_files::TRIALS,
        eval_files::HEATMAP,
        eval_files::INFERENCE,
    ]
    .iter()
    .map(|f| out_dir.join(f))
    .collect();
    write_json(&files[0], &report.curve)?;
    write_curve_csv(&report.curve, &files[1])?;
    write_jsonl(&files[2], &report.trials)?;
    let mut heat = String::new();
    for row in report.heatmap.chunks(GRID) {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        heat.push_str(&cells.join(","));
        heat.push('\n');
    }
    fs::write(&files[3], heat)?;
    write_jsonl(&files[4], &report.inference)?;
    let mut m = RunManifest::new(task, "eval")
        .seed("eval", cfg.seed)
        .param("method", method)
        .param("trials", cfg.trials)
        .param("n", report.curve.n)
        .param("max_steps", cfg.max_steps)
        .param("beta", cfg.beta)
        .param("early_stop_delta", EARLY_STOP_DELTA)
        .param("early_stop_patience", EARLY_STOP_PATIENCE);
    for p in [&paths.reference, &paths.sl_sl, &paths.finetuned, &paths.reward_head]
        .into_iter()
        .flatten()
    {
        let used = match method {
            Method::Sl => Some(p) == paths.reference.as_ref(),
            Method::SlSl => Some(p) == paths.reference.as_ref() || Some(p) == paths.sl_sl.as_ref(),
            Method::DpoImplicitRas | Method::SlImplicitRas => {
                Some(p) == paths.reference.as_ref() || Some(p) == paths.finetuned.as_ref()
            }
            Method::SlExplicitRas => Some(p) == paths.reference.as_ref() || Some(p) == paths.reward_head.as_ref(),
        };
        if used {
            m = m.input(p)?;
        }
    }
    for f in &files {
        m.output(f)?;
    }
    m.save(&out_dir.join(eval_files::MANIFEST))?;
    Ok(report)
}

/// Result of correlating implicit rewards with the oracle on held-out states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub mean: f64,
    pub per_state: Vec<f64>,
    /// States whose rewards or oracle scores were constant.
    pub skipped: usize,
}

/// Mean Spearman correlation between implicit rewards of `n` reference
/// samples and their negated post-step EMD, over `states` held-out states
/// (fresh resets advanced by a random number of expert steps).
pub fn reward_oracle_correlation(
    task: Task,
    reference: &PolicyNet,
    finetuned: &PolicyNet,
    schedule: &NoiseSchedule,
    beta: f64,
    states: usize,
    n: usize,
    seed: u64,
) -> Result<CorrelationReport> {
    let env = Env::standard(task);
    let model = ImplicitReward::new(schedule, finetuned, reference, beta)?;
    let kind = task.action_kind();
    let mut per_state = Vec::with_capacity(states);
    let mut skipped = 0;
    for i in 0..states {
        let mut rng = Rng::new(seed).derive(&[STREAM_HELDOUT, i as u64]);
        let mut state = env.reset(&mut rng);
        for _ in 0..rng.below(task.default_max_steps() / 2 + 1) {
            let a = expert_action(&env, &state)?;
            state = env.step(&state, &a, Some(&mut rng))?;
        }
        let obs = state.observe();
        let cands = reference.predict_actions(schedule, &obs, kind, n, &rng.derive(&[0]))?;
        let rewards = model.score(&obs, &cands, &mut rng.derive(&[1]))?;
        let quality = cands
            .iter()
            .map(|a| post_step_emd(&env, &state, a).map(|e| -e))
            .collect::<Result<Vec<f64>>>()?;
        match spearman(&rewards, &quality) {
            Some(r) => per_state.push(r),
            None => skipped += 1,
        }
    }
    let mean = if per_state.is_empty() {
        f64::NAN
    } else {
        per_state.iter().sum::<f64>() / per_state.len() as f64
    };
    Ok(CorrelationReport { mean, per_state, skipped })
}

/// Histogram of per-state normalized rewards.
pub const REWARD_BINS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSummary {
    pub states: usize,
    /// Counts of normalized rewards per bin over `[0, 1]`.
    pub histogram: Vec<usize>,
    /// How often each candidate slot was selected.
    pub selected: Vec<usize>,
    /// Fraction of states whose selection is not the first sample.
    pub not_first_fraction: f64,
}

pub fn summarize_rewards(records: &[InferenceRecord]) -> RewardSummary {
    let mut histogram = vec![0usize; REWARD_BINS];
    let width = records.iter().map(|r| r.candidates.len()).max().unwrap_or(0);
    let mut selected = vec![0usize; width];
    let mut not_first = 0;
    for r in records {
        for &v in &r.normalized_rewards {
            let b = ((v * REWARD_BINS as f64) as usize).min(REWARD_BINS - 1);
            histogram[b] += 1;
        }
        selected[r.selected] += 1;
        if r.selected != 0 {
            not_first += 1;
        }
    }
    RewardSummary {
        states: records.len(),
        histogram,
        selected,
        not_first_fraction: if records.is_empty() {
            0.0
        } else {
            not_first as f64 / records.len() as f64
        },
    }
}

pub fn load_inference_log(path: &Path) -> Result<Vec<InferenceRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PamError::Corrupt {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn svg_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart of mean EMD per step, one line per curve.
pub fn render_svg(curves: &[&EvalCurve], title: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    const COLORS: [&str; 5] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd"];
    let steps = curves.iter().map(|c| c.emd_mean.len()).max().unwrap_or(1).max(2);
    let ymax = curves
        .iter()
        .flat_map(|c| c.emd_mean.iter())
        .copied()
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-6)
        * 1.1;
    let x = |s: usize| PAD + (W - 2.0 * PAD) * s as f64 / (steps - 1) as f64;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * v / ymax;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{}</text>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">step</text>\n\
         <text x=\"14\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 14 {})\">mean EMD</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{:.3}</text>\n",
        W / 2.0,
        svg_escape(title),
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD,
        W / 2.0,
        H - 12.0,
        H / 2.0,
        H / 2.0,
        PAD - 4.0,
        PAD + 4.0,
        ymax
    );
    for (i, c) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = c
            .emd_mean
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(s, v)| format!("{:.2},{:.2}", x(s), y(*v)))
            .collect();
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{}</text>\n",
            W - PAD - 120.0,
            PAD + 16.0 * (i as f64 + 1.0),
            svg_escape(c.method.tag())
        ));
    }
    out.push_str("</svg>\n");
    out
}

fn file_stem(method: Method) -> String {
    method.tag().replace('+', "_")
}

/// Plot artifacts: for each curve a CSV and an SVG, a combined SVG when
/// several curves are given, and reward histogram CSVs for inference logs.
/// Returns the written paths.
pub fn plot_stage(curves: &[PathBuf], logs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if curves.is_empty() && logs.is_empty() {
        return Err(PamError::config("plot needs at least one curve or inference log"));
    }
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut loaded = Vec::new();
    for p in curves {
        let text = fs::read_to_string(p).map_err(|e| PamError::config(format!("{}: {e}", p.display())))?;
        let c: EvalCurve = serde_json::from_str(&text)?;
        let stem = format!("{}_{}", c.task, file_stem(c.method));
        let csv_path = out_dir.join(format!("{stem}.csv"));
        write_curve_csv(&c, &csv_path)?;
        let svg_path = out_dir.join(format!("{stem}.svg"));
        fs::write(&svg_path, render_svg(&[&c], &format!("{} {}", c.task, c.method)))?;
        written.push(csv_path);
        written.push(svg_path);
        loaded.push(c);
    }
    if loaded.len() > 1 {
        let refs: Vec<&EvalCurve> = loaded.iter().collect();
        let p = out_dir.join("comparison.svg");
        fs::write(&p, render_svg(&refs, "mean EMD per step"))?;
        written.push(p);
    }
    for (i, p) in logs.iter().enumerate() {
        let records = load_inference_log(p)?;
        let s = summarize_rewards(&records);
        let hp = out_dir.join(if logs.len() == 1 {
            "reward_hist.csv".to_string()
        } else {
            format!("reward_hist_{i}.csv")
        });
        let mut w = csv::Writer::from_path(&hp).map_err(csv_err)?;
        w.write_record(["bin_lo", "bin_hi", "count"]).map_err(csv_err)?;
        for (b, c) in s.histogram.iter().enumerate() {
            let lo = b as f64 / REWARD_BINS as f64;
            let hi = (b + 1) as f64 / REWARD_BINS as f64;
            w.write_record([lo.to_string(), hi.to_string(), c.to_string()]).map_err(csv_err)?;
        }
        w.flush()?;
        let sp = hp.with_file_name(hp.file_name().unwrap().to_string_lossy().replace("reward_hist", "selected_index"));
        let mut w = csv::Writer::from_path(&sp).map_err(csv_err)?;
        w.write_record(["index", "count"]).map_err(csv_err)?;
        for (idx, c) in s.selected.iter().enumerate() {
            w.write_record([idx.to_string(), c.to_string()]).map_err(csv_err)?;
        }
        w.flush()?;
        written.push(hp);
        written.push(sp);
    }
    Ok(written)
}

/// Hash of a file, for cross-run comparisons.
pub fn artifact_hash(path: &Path) -> Result<String> {
    file_hash(path)
}
