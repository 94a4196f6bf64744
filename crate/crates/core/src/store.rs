//! On-disk artifacts: JSONL datasets, binary checkpoints and run manifests.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::ScheduleConfig;
use crate::envs::Task;
use crate::error::{PamError, Result};
use crate::nn::{Mlp, MlpShape};
use crate::oracle::OracleRanking;
use crate::policy::{ActionPrimitive, PointSet, PolicyArch, PolicyNet};
use crate::preference::{build_pairs, RewardHead};
use crate::rng::Rng;

/// Schema version written on every dataset line and checkpoint header.
pub const SCHEMA_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"PAMCKPT\x01";

/// A dataset line type.
pub trait Record: Serialize + DeserializeOwned {
    fn validate(&self) -> Result<()>;
}

/// Stage-1 sample: observation, executed optimal action and auxiliaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlRecord {
    pub v: u32,
    pub task: Task,
    pub episode: u64,
    pub step: u32,
    pub obs: PointSet,
    pub optimal: ActionPrimitive,
    pub auxiliary: Vec<ActionPrimitive>,
}

impl SlRecord {
    pub fn new(task: Task, episode: u64, step: u32, obs: PointSet, optimal: ActionPrimitive, auxiliary: Vec<ActionPrimitive>) -> Self {
        Self {
            v: SCHEMA_VERSION,
            task,
            episode,
            step,
            obs,
            optimal,
            auxiliary,
        }
    }

    /// Checks the record against a configured auxiliary cap.
    pub fn validate_with(&self, max_aux: usize) -> Result<()> {
        self.validate()?;
        if self.auxiliary.len() > max_aux {
            return Err(PamError::invariant(format!(
                "{} auxiliary actions exceed the configured K = {max_aux}",
                self.auxiliary.len()
            )));
        }
        Ok(())
    }

    pub fn actions(&self) -> Vec<ActionPrimitive> {
        let mut v = vec![self.optimal];
        v.extend_from_slice(&self.auxiliary);
        v
    }
}

fn check_kind(task: Task, actions: &[ActionPrimitive]) -> Result<()> {
    for a in actions {
        a.validate()?;
        if a.kind != task.action_kind() {
            return Err(PamError::invariant(format!("{:?} action in a {task} record", a.kind)));
        }
    }
    Ok(())
}

impl Record for SlRecord {
    fn validate(&self) -> Result<()> {
        self.obs.validate()?;
        check_kind(self.task, &self.actions())
    }
}

/// Stage-2 sample: candidates, their annotation and the derived pair count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlRecord {
    pub v: u32,
    pub task: Task,
    pub episode: u64,
    pub step: u32,
    pub obs: PointSet,
    pub candidates: Vec<ActionPrimitive>,
    pub ranking: OracleRanking,
    pub pair_count: usize,
}

impl PlRecord {
    pub fn new(task: Task, episode: u64, step: u32, obs: PointSet, candidates: Vec<ActionPrimitive>, ranking: OracleRanking) -> Self {
        let pair_count = build_pairs(&ranking, &candidates, &obs).len();
        Self {
            v: SCHEMA_VERSION,
            task,
            episode,
            step,
            obs,
            candidates,
            ranking,
            pair_count,
        }
    }

    pub fn validate_with(&self, n: usize) -> Result<()> {
        self.validate()?;
        if self.candidates.len() != n {
            return Err(PamError::invariant(format!(
                "{} candidates, configured N = {n}",
                self.candidates.len()
            )));
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<crate::preference::PreferencePair> {
        build_pairs(&self.ranking, &self.candidates, &self.obs)
    }
}

impl Record for PlRecord {
    fn validate(&self) -> Result<()> {
        self.obs.validate()?;
        if self.candidates.is_empty() {
            return Err(PamError::invariant("stage-2 record without candidates"));
        }
        check_kind(self.task, &self.candidates)?;
        check_kind(self.task, std::slice::from_ref(&self.ranking.optimal_action))?;
        self.ranking.validate(self.candidates.len())?;
        let derived = self.pairs().len();
        if derived != self.pair_count {
            return Err(PamError::invariant(format!(
                "pair count {} does not match the {derived} pairs the ranking yields",
                self.pair_count
            )));
        }
        Ok(())
    }
}

/// Validates `record` and appends it as one line with a single write.
pub fn append_record<R: Record>(path: &Path, record: &R) -> Result<()> {
    record.validate()?;
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(line.as_bytes())?;
    Ok(())
}

/// Drops an unterminated trailing line left by an interrupted writer, so
/// later appends start on a fresh line. Returns whether anything was cut.
pub fn repair_tail(path: &Path) -> Result<bool> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(false),
        Err(e) => return Err(e.into()),
    };
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(false);
    }
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    log::warn!("{}: dropping {} bytes of partial trailing line", path.display(), bytes.len() - keep);
    OpenOptions::new().write(true).open(path)?.set_len(keep as u64)?;
    Ok(true)
}

fn corrupt(path: &Path, line: usize, message: impl Into<String>) -> PamError {
    PamError::Corrupt {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads and re-validates every record of a JSONL dataset.
///
/// Only an unterminated final line is tolerated (skipped with a warning);
/// any other unreadable line and any schema-version mismatch is fatal.
pub fn load_dataset<R: Record>(path: &Path) -> Result<Vec<R>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(PamError::config(format!("dataset not found: {}", path.display())))
        }
        Err(e) => return Err(e.into()),
    };
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.split_terminator('\n').collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let lineno = i + 1;
        let last = i + 1 == lines.len();
        let value: serde_json::Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) if last && !complete => {
                log::warn!("{}: skipping partial trailing line {lineno} ({e})", path.display());
                break;
            }
            Err(e) => return Err(corrupt(path, lineno, e.to_string())),
        };
        if last && !complete {
            log::warn!("{}: skipping unterminated trailing line {lineno}", path.display());
            break;
        }
        let found = value
            .get("v")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| corrupt(path, lineno, "missing schema version field \"v\""))?;
        if found != SCHEMA_VERSION as u64 {
            return Err(PamError::Schema {
                path: path.to_path_buf(),
                expected: SCHEMA_VERSION,
                found: found as u32,
            });
        }
        let rec: R = serde_json::from_value(value).map_err(|e| corrupt(path, lineno, e.to_string()))?;
        rec.validate().map_err(|e| corrupt(path, lineno, e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Reference,
    Finetuned,
    ExplicitReward,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::Reference => "reference",
            Role::Finetuned => "finetuned",
            Role::ExplicitReward => "explicit-reward",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelDescriptor {
    Policy { arch: PolicyArch },
    RewardHead { shape: MlpShape },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub v: u32,
    pub role: Role,
    pub task: Task,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub model: ModelDescriptor,
    pub param_count: usize,
}

/// Writes `header`, then the parameters as little-endian f64. The file is
/// written to a sibling temp path and renamed into place.
fn write_checkpoint(path: &Path, header: &CheckpointHeader, params: &[f64]) -> Result<()> {
    let head = serde_json::to_vec(header)?;
    let mut buf = Vec::with_capacity(16 + head.len() + 8 * params.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(head.len() as u64).to_le_bytes());
    buf.extend_from_slice(&head);
    for p in params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<f64>)> {
    let mut bytes = Vec::new();
    match File::open(path) {
        Ok(mut f) => f.read_to_end(&mut bytes)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(PamError::config(format!("checkpoint not found: {}", path.display())))
        }
        Err(e) => return Err(e.into()),
    };
    let bad = |m: &str| corrupt(path, 0, m);
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    if header.v != SCHEMA_VERSION {
        return Err(PamError::Schema {
            path: path.to_path_buf(),
            expected: SCHEMA_VERSION,
            found: header.v,
        });
    }
    let raw = &bytes[16 + hlen..];
    if raw.len() != 8 * header.param_count {
        return Err(bad("parameter block length does not match header"));
    }
    let params = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header, params))
}

fn require_role(found: Role, expected: Role) -> Result<()> {
    if found != expected {
        return Err(PamError::Role {
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

pub fn save_policy(path: &Path, net: &PolicyNet, role: Role, task: Task, seed: u64, schedule: ScheduleConfig) -> Result<()> {
    if role == Role::ExplicitReward {
        return Err(PamError::config("a policy checkpoint cannot carry the explicit-reward role"));
    }
    let params = net.flatten();
    let header = CheckpointHeader {
        v: SCHEMA_VERSION,
        role,
        task,
        seed,
        schedule,
        model: ModelDescriptor::Policy { arch: net.arch() },
        param_count: params.len(),
    };
    write_checkpoint(path, &header, &params)
}

/// Loads a policy checkpoint, refusing any role other than `expected`.
pub fn load_policy(path: &Path, expected: Role) -> Result<(PolicyNet, CheckpointHeader)> {
    let (header, params) = read_checkpoint(path)?;
    require_role(header.role, expected)?;
    let ModelDescriptor::Policy { arch } = &header.model else {
        return Err(PamError::config(format!("{} does not hold a policy", path.display())));
    };
    let mut net = PolicyNet::new(arch, &mut Rng::new(0))?;
    if net.param_count() != params.len() {
        return Err(PamError::config(format!(
            "{}: architecture needs {} parameters, file holds {}",
            path.display(),
            net.param_count(),
            params.len()
        )));
    }
    net.load_flat(&params)?;
    Ok((net, header))
}

pub fn save_reward_head(path: &Path, head: &RewardHead, task: Task, seed: u64, schedule: ScheduleConfig) -> Result<()> {
    let params = head.mlp.flatten();
    let header = CheckpointHeader {
        v: SCHEMA_VERSION,
        role: Role::ExplicitReward,
        task,
        seed,
        schedule,
        model: ModelDescriptor::RewardHead { shape: head.mlp.shape() },
        param_count: params.len(),
    };
    write_checkpoint(path, &header, &params)
}

pub fn load_reward_head(path: &Path) -> Result<(RewardHead, CheckpointHeader)> {
    let (header, params) = read_checkpoint(path)?;
    require_role(header.role, Role::ExplicitReward)?;
    let ModelDescriptor::RewardHead { shape } = &header.model else {
        return Err(PamError::config(format!("{} does not hold a reward head", path.display())));
    };
    let mut mlp = Mlp::zeros(shape)?;
    if mlp.param_count() != params.len() {
        return Err(PamError::config(format!(
            "{}: reward head needs {} parameters, file holds {}",
            path.display(),
            mlp.param_count(),
            params.len()
        )));
    }
    mlp.load_flat(&params)?;
    Ok((RewardHead::from_mlp(mlp)?, header))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash of a file.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Reproducibility record written next to every stage output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub v: u32,
    pub task: Task,
    pub stage: String,
    pub seeds: BTreeMap<String, u64>,
    pub hyperparameters: BTreeMap<String, serde_json::Value>,
    /// Input artifact path -> content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output artifact path -> content hash.
    pub outputs: BTreeMap<String, String>,
    /// Hash of task, stage, seeds and hyperparameters.
    pub config_hash: String,
}

impl RunManifest {
    pub fn new(task: Task, stage: impl Into<String>) -> Self {
        Self {
            v: SCHEMA_VERSION,
            task,
            stage: stage.into(),
            seeds: BTreeMap::new(),
            hyperparameters: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            config_hash: String::new(),
        }
    }

    pub fn seed(mut self, name: &str, seed: u64) -> Self {
        self.seeds.insert(name.into(), seed);
        self
    }

    pub fn param(mut self, name: &str, value: impl Serialize) -> Self {
        let v = serde_json::to_value(value).expect("hyperparameters serialize");
        self.hyperparameters.insert(name.into(), v);
        self
    }

    /// Records the content hash of an input file.
    pub fn input(mut self, path: &Path) -> Result<Self> {
        self.inputs.insert(path.display().to_string(), file_hash(path)?);
        Ok(self)
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(path.display().to_string(), file_hash(path)?);
        Ok(())
    }

    pub fn compute_config_hash(&self) -> String {
        let canon = serde_json::json!({
            "task": self.task,
            "stage": self.stage,
            "seeds": self.seeds,
            "hyperparameters": self.hyperparameters,
        });
        sha256_hex(canon.to_string().as_bytes())
    }

    /// Fills in the config hash and writes pretty JSON.
    pub fn save(&mut self, path: &Path) -> Result<()> {
        self.config_hash = self.compute_config_hash();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: RunManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        if m.v != SCHEMA_VERSION {
            return Err(PamError::Schema {
                path: path.to_path_buf(),
                expected: SCHEMA_VERSION,
                found: m.v,
            });
        }
        Ok(m)
    }
}

/// Conventional manifest path for an artifact: `<artifact>.manifest.json`.
pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ActionKind;

    fn obs(seed: u64) -> PointSet {
        let mut rng = Rng::new(seed);
        PointSet::new((0..64).map(|_| [rng.uniform(), rng.uniform()]).collect()).unwrap()
    }

    fn sl(seed: u64) -> SlRecord {
        let mut rng = Rng::new(seed);
        let mut a = || ActionPrimitive::new(ActionKind::Sweep, [rng.uniform(), rng.uniform()], [rng.uniform(), rng.uniform()]);
        SlRecord::new(Task::Granular, 3, seed as u32, obs(seed), a(), (0..9).map(|_| a()).collect())
    }

    #[test]
    fn sl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sl.jsonl");
        let r = sl(1);
        append_record(&p, &r).unwrap();
        let back: Vec<SlRecord> = load_dataset(&p).unwrap();
        assert_eq!(back, vec![r]);
    }

    #[test]
    fn out_of_workspace_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sl.jsonl");
        let mut r = sl(2);
        r.optimal.params[0] = 1.2;
        assert!(append_record(&p, &r).is_err());
        assert!(!p.exists());
        let mut r = sl(2);
        r.optimal.kind = ActionKind::PickPlace;
        assert!(append_record(&p, &r).is_err());
    }

    #[test]
    fn bulk_appends_keep_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sl.jsonl");
        for i in 0..1000 {
            append_record(&p, &sl(i)).unwrap();
        }
        let back: Vec<SlRecord> = load_dataset(&p).unwrap();
        assert_eq!(back.len(), 1000);
        assert!(back.iter().enumerate().all(|(i, r)| r.step == i as u32 && *r == sl(i as u64)));
    }

    #[test]
    fn empty_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        fs::write(&p, "").unwrap();
        assert!(load_dataset::<SlRecord>(&p).unwrap().is_empty());
        let err = load_dataset::<SlRecord>(&dir.path().join("nope.jsonl")).unwrap_err();
        assert!(err.is_usage());
    }

    #[test]
    fn only_trailing_partial_lines_are_tolerated() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sl.jsonl");
        append_record(&p, &sl(1)).unwrap();
        append_record(&p, &sl(2)).unwrap();
        let good = fs::read_to_string(&p).unwrap();
        let partial = format!("{good}{}", &serde_json::to_string(&sl(3)).unwrap()[..40]);
        fs::write(&p, &partial).unwrap();
        assert_eq!(load_dataset::<SlRecord>(&p).unwrap().len(), 2);
        assert!(repair_tail(&p).unwrap());
        assert_eq!(fs::read_to_string(&p).unwrap(), good);
        append_record(&p, &sl(3)).unwrap();
        assert_eq!(load_dataset::<SlRecord>(&p).unwrap().len(), 3);

        let lines: Vec<&str> = good.lines().collect();
        fs::write(&p, format!("{}\n{{broken\n{}\n", lines[0], lines[1])).unwrap();
        assert!(matches!(load_dataset::<SlRecord>(&p), Err(PamError::Corrupt { line: 2, .. })));
    }

    #[test]
    fn schema_mismatch_names_both_versions() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sl.jsonl");
        let mut r = sl(4);
        r.v = 7;
        fs::write(&p, format!("{}\n", serde_json::to_string(&r).unwrap())).unwrap();
        let err = load_dataset::<SlRecord>(&p).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("v7") && msg.contains("v1"), "{msg}");
    }

    #[test]
    fn pl_record_validates_pair_count() {
        let mut rng = Rng::new(5);
        let cands: Vec<ActionPrimitive> = (0..8)
            .map(|_| ActionPrimitive::new(ActionKind::PickPlace, [rng.uniform(), rng.uniform()], [rng.uniform(), rng.uniform()]))
            .collect();
        let ranking = OracleRanking {
            ordering: vec![4, 0, 2, 7, 1],
            unrankable: vec![3, 5, 6],
            optimal_action: cands[4],
        };
        let r = PlRecord::new(Task::Rope, 0, 0, obs(6), cands, ranking);
        // a0 equals candidate 4, so that pair is dropped.
        assert_eq!(r.pair_count, 10 + 15 + 7);
        r.validate_with(8).unwrap();
        assert!(r.validate_with(9).is_err());
        let mut bad = r.clone();
        bad.pair_count += 1;
        assert!(bad.validate().is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pl.jsonl");
        append_record(&p, &r).unwrap();
        assert_eq!(load_dataset::<PlRecord>(&p).unwrap(), vec![r]);
        // Stage-1 and stage-2 lines are not interchangeable.
        assert!(load_dataset::<SlRecord>(&p).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_role_gate() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ref.ckpt");
        let net = PolicyNet::new(&PolicyArch::standard(100), &mut Rng::new(7)).unwrap();
        save_policy(&p, &net, Role::Finetuned, Task::Rope, 7, ScheduleConfig::default()).unwrap();
        let (back, header) = load_policy(&p, Role::Finetuned).unwrap();
        assert_eq!(back.flatten().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), net.flatten().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_eq!(header.seed, 7);
        let err = load_policy(&p, Role::Reference).unwrap_err();
        assert!(matches!(err, PamError::Role { .. }) && err.is_usage());
        assert!(load_reward_head(&p).is_err());

        let hp = dir.path().join("head.ckpt");
        let head = RewardHead::new(64, 16, &mut Rng::new(8)).unwrap();
        save_reward_head(&hp, &head, Task::Rope, 8, ScheduleConfig::default()).unwrap();
        assert_eq!(load_reward_head(&hp).unwrap().0, head);
        assert!(load_policy(&hp, Role::Reference).is_err());
    }

    #[test]
    fn corrupt_checkpoint_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        let net = PolicyNet::new(&PolicyArch::with_widths(4, 8, 100), &mut Rng::new(9)).unwrap();
        save_policy(&p, &net, Role::Reference, Task::Rope, 9, ScheduleConfig::default()).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_policy(&p, Role::Reference), Err(PamError::Corrupt { .. })));
        fs::write(&p, b"hello").unwrap();
        assert!(load_policy(&p, Role::Reference).is_err());
    }

    #[test]
    fn manifest_hashes_recompute() {
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("ref.ckpt");
        let net = PolicyNet::new(&PolicyArch::with_widths(4, 8, 100), &mut Rng::new(10)).unwrap();
        save_policy(&ck, &net, Role::Reference, Task::Granular, 10, ScheduleConfig::default()).unwrap();
        let mut m = RunManifest::new(Task::Granular, "train-sl").seed("train", 10).param("epochs", 2000).param("lr", 1e-3);
        m.output(&ck).unwrap();
        let mp = manifest_path(&ck);
        m.save(&mp).unwrap();
        let back = RunManifest::load(&mp).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.outputs[&ck.display().to_string()], file_hash(&ck).unwrap());
        assert_eq!(back.config_hash, back.compute_config_hash());
        let other = RunManifest::new(Task::Granular, "train-sl").seed("train", 11).param("epochs", 2000).param("lr", 1e-3);
        assert_ne!(other.compute_config_hash(), back.config_hash);
    }
}
