//! File-backed claim/lease queue of annotation tasks.
//!
//! All mutations go through `&mut Queue`; the service wraps it in a mutex so
//! there is exactly one writer. The queue file is rewritten (tmp + rename)
//! after every mutation and dataset records are appended before a task is
//! marked done, so a restart never loses finished work. On load, tasks whose
//! record already reached the dataset are marked done.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use pam_core::envs::Task;
use pam_core::oracle::OracleRanking;
use pam_core::policy::{ActionPrimitive, PointSet};
use pam_core::store::{self, PlRecord, SlRecord, SCHEMA_VERSION};
use pam_core::PamError;
use serde::{Deserialize, Serialize};

/// Claim lease length.
pub const LEASE_MS: u64 = 10 * 60 * 1000;

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Clock moved by hand, for tests.
#[derive(Clone, Default)]
pub struct ManualClock(Arc<AtomicU64>);

impl ManualClock {
    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Stage1Optimal,
    Stage2Ranking,
}

impl std::str::FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "stage1_optimal" => Ok(TaskKind::Stage1Optimal),
            "stage2_ranking" => Ok(TaskKind::Stage2Ranking),
            other => Err(format!("unknown kind {other:?} (stage1_optimal|stage2_ranking)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Pending,
    Claimed,
    Done,
}

/// What a producer submits to be annotated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewTask {
    pub kind: TaskKind,
    pub task: Task,
    pub episode: u64,
    pub step: u32,
    pub obs: PointSet,
    /// Stage 2 only.
    #[serde(default)]
    pub candidates: Vec<ActionPrimitive>,
}

/// Annotator answer. Stage 1 fills `auxiliary`; stage 2 fills `ordering`
/// (best first) and `unrankable`, which together partition the candidates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub optimal_action: ActionPrimitive,
    #[serde(default)]
    pub ordering: Vec<usize>,
    #[serde(default)]
    pub unrankable: Vec<usize>,
    #[serde(default)]
    pub auxiliary: Vec<ActionPrimitive>,
}

impl Annotation {
    pub fn ranking(&self) -> OracleRanking {
        OracleRanking {
            ordering: self.ordering.clone(),
            unrankable: self.unrankable.clone(),
            optimal_action: self.optimal_action,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub id: String,
    pub kind: TaskKind,
    pub task: Task,
    pub episode: u64,
    pub step: u32,
    pub obs: PointSet,
    pub candidates: Vec<ActionPrimitive>,
    pub status: TaskStatus,
    pub lease: Option<String>,
    pub lease_expires_ms: Option<u64>,
    pub annotation: Option<Annotation>,
}

impl AnnotationTask {
    fn key(&self) -> (TaskKind, Task, u64, u32) {
        (self.kind, self.task, self.episode, self.step)
    }
}

/// Rejection with the offending payload field when there is one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct QueueError {
    pub kind: QueueErrorKind,
    pub field: Option<String>,
    pub message: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueErrorKind {
    Invalid,
    NotFound,
    /// Lease missing, expired or held by someone else.
    StaleLease,
    /// Task already done with a different annotation.
    Conflict,
    Storage,
}

impl QueueError {
    fn new(kind: QueueErrorKind, field: Option<&str>, message: impl Into<String>) -> Self {
        Self {
            kind,
            field: field.map(str::to_string),
            message: message.into(),
        }
    }

    fn invalid(field: &str, e: impl std::fmt::Display) -> Self {
        Self::new(QueueErrorKind::Invalid, Some(field), e.to_string())
    }
}

impl From<PamError> for QueueError {
    fn from(e: PamError) -> Self {
        Self::new(QueueErrorKind::Storage, None, e.to_string())
    }
}

impl std::fmt::Display for QueueError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.field {
            Some(field) => write!(f, "{field}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct QueueFile {
    v: u32,
    next_id: u64,
    tasks: Vec<AnnotationTask>,
}

/// Directory layout of a queue.
#[derive(Clone, Debug)]
pub struct QueuePaths {
    pub queue: PathBuf,
    pub stage1: PathBuf,
    pub stage2: PathBuf,
}

impl QueuePaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            queue: dir.join("queue.json"),
            stage1: dir.join("stage1.jsonl"),
            stage2: dir.join("stage2.jsonl"),
        }
    }
}

pub struct Queue {
    paths: QueuePaths,
    clock: Arc<dyn Clock>,
    next_id: u64,
    tasks: Vec<AnnotationTask>,
    index: BTreeMap<String, usize>,
}

fn load_if_present<R: store::Record>(path: &Path) -> Result<Vec<R>, PamError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    store::repair_tail(path)?;
    store::load_dataset(path)
}

impl Queue {
    pub fn open(paths: QueuePaths, clock: Arc<dyn Clock>) -> Result<Self, PamError> {
        let (next_id, mut tasks) = if paths.queue.exists() {
            let f: QueueFile = serde_json::from_str(&fs::read_to_string(&paths.queue)?)?;
            if f.v != SCHEMA_VERSION {
                return Err(PamError::Schema {
                    path: paths.queue.clone(),
                    expected: SCHEMA_VERSION,
                    found: f.v,
                });
            }
            (f.next_id, f.tasks)
        } else {
            (0, Vec::new())
        };
        let s1: Vec<SlRecord> = load_if_present(&paths.stage1)?;
        let s2: Vec<PlRecord> = load_if_present(&paths.stage2)?;
        let mut reconciled = false;
        for t in tasks.iter_mut().filter(|t| t.status != TaskStatus::Done) {
            let k = (t.task, t.episode, t.step);
            // Record appended but the queue write was lost.
            let written = match t.kind {
                TaskKind::Stage1Optimal => s1
                    .iter()
                    .find(|r| (r.task, r.episode, r.step) == k)
                    .map(|r| Annotation {
                        optimal_action: r.optimal,
                        ordering: Vec::new(),
                        unrankable: Vec::new(),
                        auxiliary: r.auxiliary.clone(),
                    }),
                TaskKind::Stage2Ranking => s2
                    .iter()
                    .find(|r| (r.task, r.episode, r.step) == k)
                    .map(|r| Annotation {
                        optimal_action: r.ranking.optimal_action,
                        ordering: r.ranking.ordering.clone(),
                        unrankable: r.ranking.unrankable.clone(),
                        auxiliary: Vec::new(),
                    }),
            };
            if let Some(ann) = written {
                t.status = TaskStatus::Done;
                t.lease_expires_ms = None;
                t.annotation = Some(ann);
                reconciled = true;
            }
        }
        let index = tasks.iter().enumerate().map(|(i, t)| (t.id.clone(), i)).collect();
        let q = Self {
            paths,
            clock,
            next_id,
            tasks,
            index,
        };
        if reconciled {
            q.persist()?;
        }
        Ok(q)
    }

    fn persist(&self) -> Result<(), PamError> {
        let f = QueueFile {
            v: SCHEMA_VERSION,
            next_id: self.next_id,
            tasks: self.tasks.clone(),
        };
        if let Some(dir) = self.paths.queue.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = self.paths.queue.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(&f)?)?;
        fs::rename(&tmp, &self.paths.queue)?;
        Ok(())
    }

    fn expire(&mut self) -> bool {
        let now = self.clock.now_ms();
        let mut changed = false;
        for t in &mut self.tasks {
            if t.status == TaskStatus::Claimed && t.lease_expires_ms.is_some_and(|e| e <= now) {
                t.status = TaskStatus::Pending;
                t.lease = None;
                t.lease_expires_ms = None;
                changed = true;
            }
        }
        changed
    }

    pub fn paths(&self) -> &QueuePaths {
        &self.paths
    }

    /// Adds a task, or returns the existing one for the same state.
    pub fn enqueue(&mut self, new: NewTask) -> Result<AnnotationTask, QueueError> {
        new.obs.validate().map_err(|e| QueueError::invalid("obs", e))?;
        match new.kind {
            TaskKind::Stage1Optimal if !new.candidates.is_empty() => {
                return Err(QueueError::invalid("candidates", "stage-1 tasks carry no candidates"));
            }
            TaskKind::Stage2Ranking if new.candidates.is_empty() => {
                return Err(QueueError::invalid("candidates", "stage-2 tasks need candidates"));
            }
            _ => {}
        }
        for (i, a) in new.candidates.iter().enumerate() {
            a.validate().map_err(|e| QueueError::invalid(&format!("candidates[{i}]"), e))?;
            if a.kind != new.task.action_kind() {
                return Err(QueueError::invalid(&format!("candidates[{i}]"), "action kind does not match the task"));
            }
        }
        let key = (new.kind, new.task, new.episode, new.step);
        if let Some(t) = self.tasks.iter().find(|t| t.key() == key) {
            if t.obs != new.obs || t.candidates != new.candidates {
                return Err(QueueError::new(
                    QueueErrorKind::Conflict,
                    None,
                    format!("a different task already exists for episode {} step {}", new.episode, new.step),
                ));
            }
            return Ok(t.clone());
        }
        let id = format!("t{:06}", self.next_id);
        self.next_id += 1;
        let t = AnnotationTask {
            id: id.clone(),
            kind: new.kind,
            task: new.task,
            episode: new.episode,
            step: new.step,
            obs: new.obs,
            candidates: new.candidates,
            status: TaskStatus::Pending,
            lease: None,
            lease_expires_ms: None,
            annotation: None,
        };
        self.index.insert(id, self.tasks.len());
        self.tasks.push(t.clone());
        self.persist()?;
        Ok(t)
    }

    /// Claims the oldest pending task of `kind`.
    pub fn claim_next(&mut self, kind: TaskKind) -> Result<Option<AnnotationTask>, QueueError> {
        let mut changed = self.expire();
        let now = self.clock.now_ms();
        let claimed = match self.tasks.iter_mut().find(|t| t.kind == kind && t.status == TaskStatus::Pending) {
            Some(t) => {
                t.status = TaskStatus::Claimed;
                t.lease = Some(format!("{}-{}", t.id, self.next_id));
                t.lease_expires_ms = Some(now + LEASE_MS);
                self.next_id += 1;
                changed = true;
                Some(t.clone())
            }
            None => None,
        };
        if changed {
            self.persist()?;
        }
        Ok(claimed)
    }

    pub fn get(&mut self, id: &str) -> Option<AnnotationTask> {
        if self.expire() {
            let _ = self.persist();
        }
        self.index.get(id).map(|&i| self.tasks[i].clone())
    }

    /// Validates and stores an annotation. Resubmitting the same annotation
    /// for a done task succeeds without writing again.
    pub fn submit(&mut self, id: &str, lease: &str, ann: Annotation) -> Result<AnnotationTask, QueueError> {
        if self.expire() {
            self.persist()?;
        }
        let &i = self
            .index
            .get(id)
            .ok_or_else(|| QueueError::new(QueueErrorKind::NotFound, None, format!("no task {id}")))?;
        let t = &self.tasks[i];
        if t.status == TaskStatus::Done {
            return if t.annotation.as_ref() == Some(&ann) {
                Ok(t.clone())
            } else {
                Err(QueueError::new(QueueErrorKind::Conflict, None, "task already annotated differently"))
            };
        }
        if t.status != TaskStatus::Claimed || t.lease.as_deref() != Some(lease) {
            return Err(QueueError::new(
                QueueErrorKind::StaleLease,
                Some("lease"),
                "lease expired or not held; claim the task again",
            ));
        }
        validate_annotation(t, &ann)?;
        match t.kind {
            TaskKind::Stage1Optimal => {
                let rec = SlRecord::new(t.task, t.episode, t.step, t.obs.clone(), ann.optimal_action, ann.auxiliary.clone());
                store::append_record(&self.paths.stage1, &rec)?;
            }
            TaskKind::Stage2Ranking => {
                let rec = PlRecord::new(t.task, t.episode, t.step, t.obs.clone(), t.candidates.clone(), ann.ranking());
                store::append_record(&self.paths.stage2, &rec)?;
            }
        }
        let t = &mut self.tasks[i];
        t.status = TaskStatus::Done;
        t.lease_expires_ms = None;
        t.annotation = Some(ann);
        let done = t.clone();
        self.persist()?;
        Ok(done)
    }

    pub fn counts(&mut self) -> BTreeMap<&'static str, usize> {
        self.expire();
        let mut m = BTreeMap::from([("pending", 0), ("claimed", 0), ("done", 0)]);
        for t in &self.tasks {
            let k = match t.status {
                TaskStatus::Pending => "pending",
                TaskStatus::Claimed => "claimed",
                TaskStatus::Done => "done",
            };
            *m.get_mut(k).unwrap() += 1;
        }
        m
    }
}

/// Field checks first, for precise messages, then the same record
/// validation the oracle path runs.
pub fn validate_annotation(t: &AnnotationTask, ann: &Annotation) -> Result<(), QueueError> {
    let kind_ok = |a: &ActionPrimitive| a.kind == t.task.action_kind();
    ann.optimal_action
        .validate()
        .map_err(|e| QueueError::invalid("optimal_action", e))?;
    if !kind_ok(&ann.optimal_action) {
        return Err(QueueError::invalid("optimal_action", "action kind does not match the task"));
    }
    match t.kind {
        TaskKind::Stage1Optimal => {
            if !ann.ordering.is_empty() || !ann.unrankable.is_empty() {
                return Err(QueueError::invalid("ordering", "stage-1 annotations carry no ranking"));
            }
            for (i, a) in ann.auxiliary.iter().enumerate() {
                a.validate()
                    .map_err(|e| QueueError::invalid(&format!("auxiliary[{i}]"), e))?;
                if !kind_ok(a) {
                    return Err(QueueError::invalid(&format!("auxiliary[{i}]"), "action kind does not match the task"));
                }
            }
            let rec = SlRecord::new(t.task, t.episode, t.step, t.obs.clone(), ann.optimal_action, ann.auxiliary.clone());
            store::Record::validate(&rec).map_err(|e| QueueError::invalid("annotation", e))
        }
        TaskKind::Stage2Ranking => {
            if !ann.auxiliary.is_empty() {
                return Err(QueueError::invalid("auxiliary", "stage-2 annotations carry no auxiliary actions"));
            }
            let n = t.candidates.len();
            ann.ranking()
                .validate(n)
                .map_err(|e| QueueError::invalid("ordering", e))?;
            let rec = PlRecord::new(t.task, t.episode, t.step, t.obs.clone(), t.candidates.clone(), ann.ranking());
            rec.validate_with(n).map_err(|e| QueueError::invalid("annotation", e))
        }
    }
}
