use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{DatagenError, Stage};
use crate::wire::{ChatRequest, WireClient, WireError};

/// A request to an external annotator. `key` identifies the record (and
/// step, for per-step stages) so scripted doubles can answer deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRequest {
    pub stage: Stage,
    pub key: String,
    pub chat: ChatRequest,
}

pub trait Annotator: Send + Sync {
    fn annotate(&self, req: &AnnotationRequest) -> Result<String, DatagenError>;

    /// Label recorded in provenance.
    fn name(&self) -> String;
}

/// Replies looked up by `"<stage>/<key>"`, then by stage. Every call is
/// counted and its request kept, so tests can assert on transcripts.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScriptedAnnotator {
    pub by_key: BTreeMap<String, String>,
    pub by_stage: BTreeMap<Stage, String>,
    #[serde(skip)]
    calls: AtomicUsize,
    #[serde(skip)]
    transcript: Mutex<Vec<AnnotationRequest>>,
}

impl ScriptedAnnotator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reply(mut self, stage: Stage, text: impl Into<String>) -> Self {
        self.by_stage.insert(stage, text.into());
        self
    }

    pub fn reply_for(mut self, stage: Stage, key: &str, text: impl Into<String>) -> Self {
        self.by_key
            .insert(format!("{}/{key}", stage.as_str()), text.into());
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Recorded requests sorted by stage and key.
    pub fn transcript(&self) -> Vec<AnnotationRequest> {
        let mut t = self.transcript.lock().expect("transcript lock").clone();
        t.sort_by(|a, b| (a.stage, &a.key).cmp(&(b.stage, &b.key)));
        t
    }
}

impl Annotator for ScriptedAnnotator {
    fn annotate(&self, req: &AnnotationRequest) -> Result<String, DatagenError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.transcript
            .lock()
            .expect("transcript lock")
            .push(req.clone());
        self.by_key
            .get(&format!("{}/{}", req.stage.as_str(), req.key))
            .or_else(|| self.by_stage.get(&req.stage))
            .cloned()
            .ok_or_else(|| {
                DatagenError::ClientUnavailable(format!(
                    "no scripted reply for {} {}",
                    req.stage.as_str(),
                    req.key
                ))
            })
    }

    fn name(&self) -> String {
        "scripted".into()
    }
}

pub struct RemoteAnnotator {
    client: WireClient,
    label: String,
}

impl RemoteAnnotator {
    pub fn new(client: WireClient, label: impl Into<String>) -> Self {
        Self {
            client,
            label: label.into(),
        }
    }
}

impl Annotator for RemoteAnnotator {
    fn annotate(&self, req: &AnnotationRequest) -> Result<String, DatagenError> {
        self.client
            .send(&req.chat)
            .map(|r| r.text)
            .map_err(|e| match e {
                WireError::Unavailable(m) | WireError::Protocol(m) => {
                    DatagenError::ClientUnavailable(m)
                }
                other => DatagenError::ClientUnavailable(other.to_string()),
            })
    }

    fn name(&self) -> String {
        self.label.clone()
    }
}
