//! Blocking HTTP client for the annotation service.

use std::thread::sleep;
use std::time::{Duration, Instant};

use pam_core::oracle::OracleRanking;
use pam_core::pipeline::{AnnotationRequest, Annotator};
use pam_core::PamError;
use serde::de::DeserializeOwned;
use serde_json::Value;

use crate::queue::{Annotation, AnnotationTask, NewTask, TaskKind, TaskStatus};
use crate::{Ack, Submission};

/// A non-2xx answer, with the service's error body when it sent one.
#[derive(Debug)]
pub enum ClientError {
    /// Connection refused, timeout or similar; worth retrying.
    Transport(String),
    Status { code: u16, body: Value },
    Decode(String),
}

impl std::fmt::Display for ClientError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClientError::Transport(m) => write!(f, "transport error: {m}"),
            ClientError::Status { code, body } => write!(f, "HTTP {code}: {body}"),
            ClientError::Decode(m) => write!(f, "bad response: {m}"),
        }
    }
}

impl std::error::Error for ClientError {}

pub struct ApiClient {
    base: String,
    http: reqwest::blocking::Client,
}

fn field<T: DeserializeOwned>(mut v: Value, name: &str) -> Result<T, ClientError> {
    serde_json::from_value(v[name].take()).map_err(|e| ClientError::Decode(format!("{name}: {e}")))
}

impl ApiClient {
    pub fn new(base: &str) -> Self {
        Self {
            base: base.trim_end_matches('/').to_string(),
            http: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(30))
                .build()
                .expect("http client"),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn send(&self, req: reqwest::blocking::RequestBuilder) -> Result<Value, ClientError> {
        let resp = req.send().map_err(|e| ClientError::Transport(e.to_string()))?;
        let code = resp.status().as_u16();
        let text = resp.text().map_err(|e| ClientError::Transport(e.to_string()))?;
        let body: Value = serde_json::from_str(&text).unwrap_or(Value::String(text));
        if (200..300).contains(&code) {
            Ok(body)
        } else {
            Err(ClientError::Status { code, body })
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub fn health(&self) -> Result<Value, ClientError> {
        self.send(self.http.get(self.url("/api/health")))
    }

    pub fn enqueue(&self, task: &NewTask) -> Result<AnnotationTask, ClientError> {
        field(self.send(self.http.post(self.url("/api/tasks")).json(task))?, "task")
    }

    pub fn get(&self, id: &str) -> Result<AnnotationTask, ClientError> {
        field(self.send(self.http.get(self.url(&format!("/api/tasks/{id}"))))?, "task")
    }

    /// `None` when nothing of `kind` is pending.
    pub fn next(&self, kind: TaskKind) -> Result<Option<AnnotationTask>, ClientError> {
        let kind = serde_json::to_value(kind).unwrap();
        let url = self.url(&format!("/api/tasks/next?kind={}", kind.as_str().unwrap()));
        field(self.send(self.http.get(url))?, "task")
    }

    pub fn submit(&self, id: &str, lease: &str, annotation: &Annotation) -> Result<Ack, ClientError> {
        let body = Submission {
            lease: lease.to_string(),
            annotation: annotation.clone(),
        };
        let v = self.send(self.http.post(self.url(&format!("/api/tasks/{id}/annotation"))).json(&body))?;
        serde_json::from_value(v).map_err(|e| ClientError::Decode(e.to_string()))
    }

    pub fn replay(&self, episode: &str) -> Result<Vec<pam_core::ras::InferenceRecord>, ClientError> {
        field(self.send(self.http.get(self.url(&format!("/api/replay/{episode}"))))?, "records")
    }
}

/// Stage-2 annotator that queues each state on the service and waits for a
/// human ranking.
pub struct ServiceAnnotator {
    pub client: ApiClient,
    /// Attempts per request before giving up on an unreachable service.
    pub retries: u32,
    /// First retry delay; doubles per attempt.
    pub backoff: Duration,
    pub poll: Duration,
    /// Longest wait for one ranking before stopping (resumable).
    pub max_wait: Duration,
}

impl ServiceAnnotator {
    pub fn new(base: &str) -> Self {
        Self {
            client: ApiClient::new(base),
            retries: 5,
            backoff: Duration::from_millis(500),
            poll: Duration::from_secs(2),
            max_wait: Duration::from_secs(24 * 3600),
        }
    }

    fn with_retry<T>(&self, mut f: impl FnMut() -> Result<T, ClientError>) -> Result<Option<T>, PamError> {
        let mut delay = self.backoff;
        for attempt in 0..self.retries.max(1) {
            match f() {
                Ok(v) => return Ok(Some(v)),
                Err(ClientError::Transport(m)) => {
                    log::warn!("annotation service unreachable (attempt {}): {m}", attempt + 1);
                    if attempt + 1 < self.retries {
                        sleep(delay);
                        delay *= 2;
                    }
                }
                Err(e) => return Err(PamError::invariant(format!("annotation service: {e}"))),
            }
        }
        Ok(None)
    }
}

impl Annotator for ServiceAnnotator {
    fn annotate(&mut self, req: &AnnotationRequest<'_>) -> pam_core::Result<Option<OracleRanking>> {
        let new = NewTask {
            kind: TaskKind::Stage2Ranking,
            task: req.task,
            episode: req.episode,
            step: req.step,
            obs: req.obs.clone(),
            candidates: req.candidates.to_vec(),
        };
        let Some(task) = self.with_retry(|| self.client.enqueue(&new))? else {
            return Ok(None);
        };
        let started = Instant::now();
        loop {
            let Some(t) = self.with_retry(|| self.client.get(&task.id))? else {
                return Ok(None);
            };
            if t.status == TaskStatus::Done {
                let ann = t
                    .annotation
                    .ok_or_else(|| PamError::invariant(format!("task {} done without an annotation", t.id)))?;
                return Ok(Some(ann.ranking()));
            }
            if started.elapsed() >= self.max_wait {
                log::warn!("no ranking for task {} within {:?}", t.id, self.max_wait);
                return Ok(None);
            }
            sleep(self.poll);
        }
    }
}
