use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pam_core::envs::{Env, Task};
use pam_core::pipeline::{
    self, CheckpointPaths, CollectConfig, EvalConfig, Method, OracleAnnotator, RolloutConfig, TrainSlInputs,
};
use pam_core::policy::SupervisedConfig;
use pam_core::preference::{DpoConfig, ExplicitConfig};
use pam_core::{PamError, Result};

/// Environment variable naming the directory relative paths resolve against.
const DATA_ROOT_VAR: &str = "PAM_DATA_ROOT";

#[derive(Parser)]
#[command(name = "pam", version, about = "Deformable object manipulation with preference-aligned diffusion policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: roll the scripted expert and record optimal + auxiliary actions.
    Collect(CollectArgs),
    /// Train a reference policy with the supervised denoising loss.
    TrainSl(TrainSlArgs),
    /// Stage 2: sample candidates from the reference policy and collect rankings.
    Rollout(RolloutArgs),
    /// Preference finetuning of the reference policy.
    TrainDpo(TrainPrefArgs),
    /// Bradley-Terry reward head on the frozen reference encoder.
    TrainExplicit(TrainPrefArgs),
    /// Evaluate one method over seeded trials.
    Eval(EvalArgs),
    /// Render curves and inference logs to CSV and SVG.
    Plot(PlotArgs),
    /// Mean rank correlation between implicit rewards and the oracle.
    Correlate(CorrelateArgs),
    /// Run the annotation service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: std::net::SocketAddr,
    /// Directory holding the queue and the annotated datasets.
    #[arg(long)]
    dir: PathBuf,
    /// Inference logs served for replay.
    #[arg(long = "replay")]
    replay: Vec<PathBuf>,
}

#[derive(Args)]
struct CollectArgs {
    #[arg(long)]
    task: Task,
    /// Number of states to record.
    #[arg(long, default_value_t = 400)]
    states: usize,
    /// Auxiliary actions per state.
    #[arg(long, default_value_t = 9)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainSlArgs {
    #[arg(long)]
    task: Task,
    /// Stage-1 dataset.
    #[arg(long)]
    data: PathBuf,
    /// Stage-2 dataset whose annotated optimal actions are added (SL+SL).
    #[arg(long)]
    stage2: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Oracle,
    Serve,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    task: Task,
    #[arg(long)]
    reference: PathBuf,
    /// Number of states to record.
    #[arg(long, default_value_t = 200)]
    states: usize,
    /// Candidates per state.
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, value_enum, default_value_t = Source::Oracle)]
    source: Source,
    /// Annotation service base URL for `--source serve`.
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    server: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainPrefArgs {
    #[arg(long)]
    task: Task,
    /// Stage-2 preference dataset.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    /// Sharpness of the preference objective (DPO only).
    #[arg(long, default_value_t = 100.0)]
    beta: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long)]
    lr: Option<f64>,
    /// Sample pairs uniformly instead of by rank distance.
    #[arg(long)]
    uniform: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    task: Task,
    #[arg(long)]
    method: Method,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    sl_sl: Option<PathBuf>,
    #[arg(long)]
    finetuned: Option<PathBuf>,
    #[arg(long)]
    reward_head: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 8)]
    n: usize,
    /// Defaults to the task's step cap.
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long, default_value_t = 100.0)]
    beta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// Curve JSON files written by `eval`.
    #[arg(long = "curve")]
    curves: Vec<PathBuf>,
    /// Inference logs written by `eval`.
    #[arg(long = "inference")]
    logs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CorrelateArgs {
    #[arg(long)]
    task: Task,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    finetuned: PathBuf,
    #[arg(long, default_value_t = 50)]
    states: usize,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 100.0)]
    beta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

struct Paths {
    root: Option<PathBuf>,
}

impl Paths {
    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.root {
            Some(r) if p.is_relative() => r.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn input(&self, p: &Path) -> Result<PathBuf> {
        let r = self.resolve(p);
        if !r.exists() {
            return Err(PamError::config(format!("{} does not exist", r.display())));
        }
        Ok(r)
    }

    fn output(&self, p: &Path) -> Result<PathBuf> {
        let r = self.resolve(p);
        if let Some(dir) = r.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        Ok(r)
    }
}

fn run(cli: Cli) -> Result<()> {
    let paths = Paths {
        root: std::env::var_os(DATA_ROOT_VAR).map(PathBuf::from),
    };
    match cli.command {
        Command::Collect(a) => {
            let cfg = CollectConfig {
                task: a.task,
                num_states: a.states,
                k: a.k,
                seed: a.seed,
            };
            let out = paths.output(&a.out)?;
            let n = pipeline::collect_stage1(&cfg, &out)?;
            println!("wrote {n} stage-1 records to {}", out.display());
        }
        Command::TrainSl(a) => {
            let data = paths.input(&a.data)?;
            let stage2 = a.stage2.as_deref().map(|p| paths.input(p)).transpose()?;
            let cfg = SupervisedConfig {
                epochs: a.epochs,
                lr: a.lr,
                ..SupervisedConfig::default()
            };
            let out = paths.output(&a.out)?;
            let inputs = TrainSlInputs {
                task: a.task,
                sl: &data,
                pl: stage2.as_deref(),
            };
            let curve = pipeline::train_sl_stage(&inputs, &cfg, a.seed, &out)?;
            println!("final loss {:.6}; checkpoint {}", curve.last().copied().unwrap_or(f64::NAN), out.display());
        }
        Command::Rollout(a) => {
            let reference = paths.input(&a.reference)?;
            let (net, schedule, _) = pipeline::load_reference(&reference, a.task)?;
            let cfg = RolloutConfig {
                task: a.task,
                num_states: a.states,
                n: a.n,
                seed: a.seed,
            };
            let out = paths.output(&a.out)?;
            let summary = match a.source {
                Source::Oracle => {
                    let mut annotator = OracleAnnotator {
                        env: Env::standard(a.task),
                    };
                    pipeline::rollout_stage2(&cfg, &net, &schedule, &mut annotator, &out)?
                }
                Source::Serve => {
                    let mut annotator = pam_server::ServiceAnnotator::new(&a.server);
                    pipeline::rollout_stage2(&cfg, &net, &schedule, &mut annotator, &out)?
                }
            };
            let source = match a.source {
                Source::Oracle => "oracle",
                Source::Serve => "serve",
            };
            if summary.complete {
                pipeline::write_rollout_manifest(&cfg, &reference, source, &out)?;
            }
            println!(
                "{} new stage-2 records, {} total{}",
                summary.written,
                summary.total,
                if summary.complete { "" } else { " (incomplete, rerun to resume)" }
            );
        }
        Command::TrainDpo(a) => {
            let data = paths.input(&a.data)?;
            let reference = paths.input(&a.reference)?;
            let d = DpoConfig::default();
            let cfg = DpoConfig {
                beta: a.beta,
                epochs: a.epochs,
                lr: a.lr.unwrap_or(d.lr),
                weighted: !a.uniform,
                ..d
            };
            let out = paths.output(&a.out)?;
            let curve = pipeline::train_dpo_stage(a.task, &data, &reference, &cfg, a.seed, &out)?;
            println!("final loss {:.6}; checkpoint {}", curve.last().copied().unwrap_or(f64::NAN), out.display());
        }
        Command::TrainExplicit(a) => {
            let data = paths.input(&a.data)?;
            let reference = paths.input(&a.reference)?;
            let d = ExplicitConfig::default();
            let cfg = ExplicitConfig {
                epochs: a.epochs,
                lr: a.lr.unwrap_or(d.lr),
                weighted: !a.uniform,
                ..d
            };
            let out = paths.output(&a.out)?;
            let curve = pipeline::train_explicit_stage(a.task, &data, &reference, &cfg, a.seed, &out)?;
            println!("final loss {:.6}; checkpoint {}", curve.last().copied().unwrap_or(f64::NAN), out.display());
        }
        Command::Eval(a) => {
            let opt = |p: &Option<PathBuf>| p.as_deref().map(|p| paths.input(p)).transpose();
            let ckpts = CheckpointPaths {
                reference: Some(paths.input(&a.reference)?),
                sl_sl: opt(&a.sl_sl)?,
                finetuned: opt(&a.finetuned)?,
                reward_head: opt(&a.reward_head)?,
            };
            let cfg = EvalConfig {
                trials: a.trials,
                n: a.n,
                max_steps: a.max_steps.unwrap_or(a.task.default_max_steps()),
                beta: a.beta,
                seed: a.seed,
            };
            let out = paths.resolve(&a.out);
            let report = pipeline::eval_stage(a.task, a.method, &ckpts, &cfg, &out)?;
            println!(
                "{} on {}: mean final EMD {:.5}, {} failed trials; outputs in {}",
                a.method,
                a.task,
                report.curve.final_emd_mean(),
                report.curve.failed,
                out.display()
            );
        }
        Command::Plot(a) => {
            let curves = a.curves.iter().map(|p| paths.input(p)).collect::<Result<Vec<_>>>()?;
            let logs = a.logs.iter().map(|p| paths.input(p)).collect::<Result<Vec<_>>>()?;
            let written = pipeline::plot_stage(&curves, &logs, &paths.resolve(&a.out))?;
            for p in written {
                println!("{}", p.display());
            }
        }
        Command::Correlate(a) => {
            let (reference, schedule, header) = pipeline::load_reference(&paths.input(&a.reference)?, a.task)?;
            let fine_path = paths.input(&a.finetuned)?;
            let (fine, fh) = pam_core::store::load_policy(&fine_path, pam_core::store::Role::Finetuned)?;
            if fh.task != a.task || fh.schedule != header.schedule {
                return Err(PamError::config("finetuned checkpoint does not match the reference"));
            }
            let r =
                pipeline::reward_oracle_correlation(a.task, &reference, &fine, &schedule, a.beta, a.states, a.n, a.seed)?;
            println!("{}", serde_json::to_string(&r)?);
        }
        Command::Serve(a) => {
            let dir = paths.resolve(&a.dir);
            let replay = a.replay.iter().map(|p| paths.resolve(p)).collect();
            let state = pam_server::AppState::open(&dir, replay, std::sync::Arc::new(pam_server::SystemClock))?;
            pam_server::run_blocking(a.bind, state)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 3 })
        }
    }
}
