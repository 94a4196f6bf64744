//! Python bindings: environments, oracle, policy sampling and the pipeline
//! stages. Build with `--features extension-module`.

use std::collections::HashMap;
use std::path::PathBuf;

use pam_core::diffusion::NoiseSchedule;
use pam_core::envs::{self, EnvState, Task};
use pam_core::pipeline::{self, CheckpointPaths, CollectConfig, EvalConfig, Method, OracleAnnotator, RolloutConfig};
use pam_core::policy::{ActionKind, ActionPrimitive, PointSet, PolicyNet, SupervisedConfig};
use pam_core::preference::{DpoConfig, ExplicitConfig};
use pam_core::{PamError, Rng};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: PamError) -> PyErr {
    if e.is_usage() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// For argument validation, where every failure is the caller's.
fn value_err(e: PamError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_task(name: &str) -> PyResult<Task> {
    name.parse().map_err(py_err)
}

fn parse_kind(name: &str) -> PyResult<ActionKind> {
    match name {
        "sweep" => Ok(ActionKind::Sweep),
        "pick_place" => Ok(ActionKind::PickPlace),
        other => Err(PyValueError::new_err(format!("unknown action kind {other:?} (sweep|pick_place)"))),
    }
}

fn kind_name(k: ActionKind) -> &'static str {
    match k {
        ActionKind::Sweep => "sweep",
        ActionKind::PickPlace => "pick_place",
    }
}

#[pyclass(name = "Action", from_py_object)]
#[derive(Clone)]
struct PyAction {
    inner: ActionPrimitive,
}

#[pymethods]
impl PyAction {
    #[new]
    fn new(kind: &str, start: [f64; 2], end: [f64; 2]) -> PyResult<Self> {
        let inner = ActionPrimitive::new(parse_kind(kind)?, start, end);
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        kind_name(self.inner.kind)
    }

    #[getter]
    fn start(&self) -> [f64; 2] {
        self.inner.start()
    }

    #[getter]
    fn end(&self) -> [f64; 2] {
        self.inner.end()
    }

    fn __repr__(&self) -> String {
        let (s, e) = (self.inner.start(), self.inner.end());
        format!(
            "Action({:?}, ({:.4}, {:.4}), ({:.4}, {:.4}))",
            self.kind(),
            s[0],
            s[1],
            e[0],
            e[1]
        )
    }
}

#[pyclass(name = "State", from_py_object)]
#[derive(Clone)]
struct PyState {
    inner: EnvState,
}

#[pymethods]
impl PyState {
    #[getter]
    fn task(&self) -> &'static str {
        self.inner.task().name()
    }

    /// The 64-point observation.
    fn observe(&self) -> Vec<[f64; 2]> {
        self.inner.observe().points
    }
}

#[pyclass(name = "Env")]
struct PyEnv {
    inner: envs::Env,
}

#[pymethods]
impl PyEnv {
    #[new]
    fn new(task: &str) -> PyResult<Self> {
        Ok(Self {
            inner: envs::Env::standard(parse_task(task)?),
        })
    }

    #[getter]
    fn max_steps(&self) -> usize {
        self.inner.task.default_max_steps()
    }

    fn reset(&self, seed: u64) -> PyState {
        PyState {
            inner: self.inner.reset(&mut Rng::new(seed)),
        }
    }

    /// Noise-free when `seed` is None.
    #[pyo3(signature = (state, action, seed=None))]
    fn step(&self, state: &PyState, action: &PyAction, seed: Option<u64>) -> PyResult<PyState> {
        let mut rng = seed.map(Rng::new);
        let inner = self.inner.step(&state.inner, &action.inner, rng.as_mut()).map_err(py_err)?;
        Ok(PyState { inner })
    }

    fn metrics(&self, state: &PyState) -> HashMap<&'static str, f64> {
        let m = self.inner.measure(&state.inner);
        HashMap::from([("iou", m.iou), ("coverage", m.coverage), ("emd", m.emd)])
    }

    fn expert_action(&self, state: &PyState) -> PyResult<PyAction> {
        let inner = pam_core::oracle::expert_action(&self.inner, &state.inner).map_err(py_err)?;
        Ok(PyAction { inner })
    }

    /// `(ordering, unrankable, optimal_action, post_step_emds)`.
    fn oracle_rank(&self, state: &PyState, candidates: Vec<PyAction>) -> PyResult<(Vec<usize>, Vec<usize>, PyAction, Vec<f64>)> {
        let c: Vec<ActionPrimitive> = candidates.iter().map(|a| a.inner).collect();
        let (r, scores) = pam_core::oracle::oracle_rank(&self.inner, &state.inner, &c).map_err(py_err)?;
        Ok((r.ordering, r.unrankable, PyAction { inner: r.optimal_action }, scores))
    }
}

#[pyclass(name = "Policy")]
struct PyPolicy {
    net: PolicyNet,
    schedule: NoiseSchedule,
    task: Task,
}

#[pymethods]
impl PyPolicy {
    /// Loads a reference checkpoint.
    #[staticmethod]
    fn load(path: PathBuf, task: &str) -> PyResult<Self> {
        let t = parse_task(task)?;
        let (net, schedule, _) = pipeline::load_reference(&path, t).map_err(py_err)?;
        Ok(Self { net, schedule, task: t })
    }

    fn predict(&self, obs: Vec<[f64; 2]>, n: usize, seed: u64) -> PyResult<Vec<PyAction>> {
        let obs = PointSet::new(obs).map_err(value_err)?;
        let actions = self
            .net
            .predict_actions(&self.schedule, &obs, self.task.action_kind(), n, &Rng::new(seed))
            .map_err(py_err)?;
        Ok(actions.into_iter().map(|inner| PyAction { inner }).collect())
    }
}

#[pyfunction]
fn emd(a: Vec<[f64; 2]>, b: Vec<[f64; 2]>) -> PyResult<f64> {
    if a.len() != b.len() {
        return Err(PyValueError::new_err("point sets must have equal size"));
    }
    Ok(envs::emd::emd(&a, &b))
}

#[pyfunction]
fn expected_pair_count(rankable: usize, unrankable: usize) -> usize {
    pam_core::preference::expected_pair_count(rankable, unrankable)
}

#[pyfunction]
#[pyo3(signature = (task, out, states=400, k=9, seed=0))]
fn collect(task: &str, out: PathBuf, states: usize, k: usize, seed: u64) -> PyResult<usize> {
    let cfg = CollectConfig {
        task: parse_task(task)?,
        num_states: states,
        k,
        seed,
    };
    pipeline::collect_stage1(&cfg, &out).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (task, data, out, epochs=2000, seed=0, stage2=None))]
fn train_sl(task: &str, data: PathBuf, out: PathBuf, epochs: usize, seed: u64, stage2: Option<PathBuf>) -> PyResult<Vec<f64>> {
    let inputs = pipeline::TrainSlInputs {
        task: parse_task(task)?,
        sl: &data,
        pl: stage2.as_deref(),
    };
    let cfg = SupervisedConfig {
        epochs,
        ..SupervisedConfig::default()
    };
    pipeline::train_sl_stage(&inputs, &cfg, seed, &out).map_err(py_err)
}

/// Oracle-annotated stage-2 rollout; returns `(written, total, complete)`.
#[pyfunction]
#[pyo3(signature = (task, reference, out, states=200, n=8, seed=0))]
fn rollout(task: &str, reference: PathBuf, out: PathBuf, states: usize, n: usize, seed: u64) -> PyResult<(usize, usize, bool)> {
    let t = parse_task(task)?;
    let (net, schedule, _) = pipeline::load_reference(&reference, t).map_err(py_err)?;
    let cfg = RolloutConfig {
        task: t,
        num_states: states,
        n,
        seed,
    };
    let mut ann = OracleAnnotator { env: envs::Env::standard(t) };
    let s = pipeline::rollout_stage2(&cfg, &net, &schedule, &mut ann, &out).map_err(py_err)?;
    Ok((s.written, s.total, s.complete))
}

#[pyfunction]
#[pyo3(signature = (task, data, reference, out, beta=100.0, epochs=200, seed=0))]
fn train_dpo(task: &str, data: PathBuf, reference: PathBuf, out: PathBuf, beta: f64, epochs: usize, seed: u64) -> PyResult<Vec<f64>> {
    let cfg = DpoConfig {
        beta,
        epochs,
        ..DpoConfig::default()
    };
    pipeline::train_dpo_stage(parse_task(task)?, &data, &reference, &cfg, seed, &out).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (task, data, reference, out, epochs=200, seed=0))]
fn train_explicit(task: &str, data: PathBuf, reference: PathBuf, out: PathBuf, epochs: usize, seed: u64) -> PyResult<Vec<f64>> {
    let cfg = ExplicitConfig {
        epochs,
        ..ExplicitConfig::default()
    };
    pipeline::train_explicit_stage(parse_task(task)?, &data, &reference, &cfg, seed, &out).map_err(py_err)
}

/// Runs one method and writes its outputs to `out`; returns the curve as JSON.
#[pyfunction]
#[pyo3(signature = (task, method, reference, out, finetuned=None, sl_sl=None, reward_head=None, trials=20, n=8, max_steps=None, beta=100.0, seed=0))]
#[allow(clippy::too_many_arguments)]
fn evaluate(
    task: &str,
    method: &str,
    reference: PathBuf,
    out: PathBuf,
    finetuned: Option<PathBuf>,
    sl_sl: Option<PathBuf>,
    reward_head: Option<PathBuf>,
    trials: usize,
    n: usize,
    max_steps: Option<usize>,
    beta: f64,
    seed: u64,
) -> PyResult<String> {
    let t = parse_task(task)?;
    let m: Method = method.parse().map_err(py_err)?;
    let paths = CheckpointPaths {
        reference: Some(reference),
        sl_sl,
        finetuned,
        reward_head,
    };
    let cfg = EvalConfig {
        trials,
        n,
        max_steps: max_steps.unwrap_or(t.default_max_steps()),
        beta,
        seed,
    };
    let r = pipeline::eval_stage(t, m, &paths, &cfg, &out).map_err(py_err)?;
    serde_json::to_string(&r.curve).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn pam_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyAction>()?;
    m.add_class::<PyState>()?;
    m.add_class::<PyEnv>()?;
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(emd, m)?)?;
    m.add_function(wrap_pyfunction!(expected_pair_count, m)?)?;
    m.add_function(wrap_pyfunction!(collect, m)?)?;
    m.add_function(wrap_pyfunction!(train_sl, m)?)?;
    m.add_function(wrap_pyfunction!(rollout, m)?)?;
    m.add_function(wrap_pyfunction!(train_dpo, m)?)?;
    m.add_function(wrap_pyfunction!(train_explicit, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    let methods: Vec<&str> = Method::ALL.iter().map(|m| m.tag()).collect();
    m.add("METHODS", methods)?;
    Ok(())
}
