//! On-policy reflection data: winner/loser pairs from rollout groups,
//! corrective rationales, and SFT export.

use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::agent::Sandbox;
use crate::par;
use crate::sepo::RolloutGroup;
use crate::toolbox::{ImageRef, ImageStore};
use crate::trajectory::{
    parse, serialize, write_jsonl, AnyTrajectory, EditTrajectory, ReflectionTrajectory, Think,
    ToolStep, TrajectoryError,
};
use crate::wire::{ChatRequest, Message, Part, Speaker, WireClient, WireError};

/// Role-play prompt sent ahead of the four images.
pub const REFLECTION_PROMPT: &str = include_str!("../assets/prompts/reflection.txt");

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReflectionError {
    #[error("rationale client unavailable: {0}")]
    ClientUnavailable(String),
    #[error("rationale client returned empty text")]
    EmptyRationale,
    #[error("no reflection trajectories to export")]
    EmptyDataset,
    #[error("candidate line {line}: {message}")]
    BadCandidate { line: usize, message: String },
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReflectionPair {
    pub winner: usize,
    pub winner_score: f64,
    pub loser: usize,
    pub loser_score: f64,
}

/// `(argmax, argmin)` with lowest-index tie-breaking; `None` when all scores are equal.
pub fn best_and_worst(scores: &[f64]) -> Option<(usize, usize)> {
    scores.first()?;
    let (mut hi, mut lo) = (0, 0);
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[hi] {
            hi = i;
        }
        if s < scores[lo] {
            lo = i;
        }
    }
    (scores[hi] > scores[lo]).then_some((hi, lo))
}

/// The editor rollouts of one input, as kept for reflection mining.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGroup {
    pub source: ImageRef,
    pub query: String,
    pub members: Vec<EditTrajectory>,
}

impl CandidateGroup {
    /// `None` for evaluator-loop groups.
    pub fn from_rollouts(group: &RolloutGroup) -> Option<Self> {
        let members = group
            .members
            .iter()
            .map(|m| m.trajectory.as_edit().cloned())
            .collect::<Option<Vec<_>>>()?;
        Some(Self {
            source: group.source.clone(),
            query: group.query.clone(),
            members,
        })
    }

    pub fn self_scores(&self) -> Vec<f64> {
        self.members.iter().map(|t| t.self_eval().score()).collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CandidateLine {
    members: Vec<serde_json::Value>,
}

/// One line per group holding its members as trajectory records.
pub fn write_candidates<W: Write>(mut w: W, groups: &[CandidateGroup]) -> std::io::Result<usize> {
    for g in groups {
        let members = g
            .members
            .iter()
            .map(|t| {
                serde_json::from_str(&serialize(&AnyTrajectory::Edit(t.clone())))
                    .expect("records are JSON")
            })
            .collect();
        serde_json::to_writer(&mut w, &CandidateLine { members })?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(groups.len())
}

pub fn read_candidates<R: BufRead>(r: R) -> Result<Vec<CandidateGroup>, ReflectionError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let bad = |message: String| ReflectionError::BadCandidate {
            line: i + 1,
            message,
        };
        let line = line.map_err(|e| bad(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CandidateLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let members = parsed
            .members
            .iter()
            .map(|v| match parse(&v.to_string()) {
                Ok(AnyTrajectory::Edit(t)) => Ok(t),
                Ok(other) => Err(bad(format!(
                    "expected edit trajectories, found {:?}",
                    other.kind()
                ))),
                Err(e) => Err(bad(e.to_string())),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let first = members
            .first()
            .ok_or_else(|| bad("group has no members".into()))?;
        let (source, query) = (first.source().clone(), first.query().to_string());
        if members
            .iter()
            .any(|m| m.source() != &source || m.query() != query)
        {
            return Err(bad("members disagree on source or query".into()));
        }
        out.push(CandidateGroup {
            source,
            query,
            members,
        });
    }
    Ok(out)
}

/// At most one pair per group: best versus worst self-score.
pub fn detect_pairs(group: &CandidateGroup) -> Vec<ReflectionPair> {
    let scores = group.self_scores();
    best_and_worst(&scores)
        .map(|(w, l)| ReflectionPair {
            winner: w,
            winner_score: scores[w],
            loser: l,
            loser_score: scores[l],
        })
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RationaleRequest {
    pub source: ImageRef,
    pub query: String,
    pub loser_final: ImageRef,
    pub winner_final: ImageRef,
}

pub trait RationaleClient: Send + Sync {
    fn rationale(&self, req: &RationaleRequest) -> Result<String, ReflectionError>;
}

/// Returns canned texts, picked by the loser's image hash so the reply
/// does not depend on request order.
#[derive(Debug, Clone)]
pub struct ScriptedRationale {
    texts: Vec<String>,
}

impl ScriptedRationale {
    pub fn new(texts: Vec<String>) -> Self {
        Self { texts }
    }
}

impl RationaleClient for ScriptedRationale {
    fn rationale(&self, req: &RationaleRequest) -> Result<String, ReflectionError> {
        if self.texts.is_empty() {
            return Err(ReflectionError::ClientUnavailable("script is empty".into()));
        }
        let h = req.loser_final.hash.0;
        let key = u64::from_le_bytes(h[..8].try_into().expect("hash has 32 bytes"));
        Ok(self.texts[(key % self.texts.len() as u64) as usize].clone())
    }
}

pub struct RemoteRationale {
    client: WireClient,
    store: Arc<dyn ImageStore>,
    prompt: String,
}

impl RemoteRationale {
    pub fn new(client: WireClient, store: Arc<dyn ImageStore>) -> Self {
        Self {
            client,
            store,
            prompt: REFLECTION_PROMPT.to_string(),
        }
    }

    pub fn request(&self, req: &RationaleRequest) -> Result<ChatRequest, ReflectionError> {
        let image = |r: &ImageRef| {
            self.store
                .get(r)
                .map(|img| Part::image(&img))
                .map_err(|e| ReflectionError::ClientUnavailable(e.to_string()))
        };
        let content = vec![
            Part::text("Original photo:"),
            image(&req.source)?,
            Part::text(format!("Request: {}", req.query)),
            Part::text("First attempt:"),
            image(&req.loser_final)?,
            Part::text("Stronger attempt:"),
            image(&req.winner_final)?,
        ];
        Ok(ChatRequest {
            messages: vec![
                Message::new(Speaker::System, vec![Part::text(self.prompt.clone())]),
                Message::new(Speaker::User, content),
            ],
            max_tokens: None,
        })
    }
}

impl RationaleClient for RemoteRationale {
    fn rationale(&self, req: &RationaleRequest) -> Result<String, ReflectionError> {
        let resp = self.client.send(&self.request(req)?).map_err(|e| match e {
            WireError::Protocol(m) => ReflectionError::ClientUnavailable(m),
            other => ReflectionError::ClientUnavailable(other.to_string()),
        })?;
        Ok(resp.text)
    }
}

/// Asks `client` for a rationale; empty or whitespace-only text is an error.
pub fn request_rationale(
    client: &dyn RationaleClient,
    req: &RationaleRequest,
) -> Result<String, ReflectionError> {
    let text = client.rationale(req)?;
    let text = text.trim();
    if text.is_empty() {
        return Err(ReflectionError::EmptyRationale);
    }
    Ok(text.to_string())
}

pub fn rationale_request(group: &CandidateGroup, pair: &ReflectionPair) -> RationaleRequest {
    RationaleRequest {
        source: group.source.clone(),
        query: group.query.clone(),
        loser_final: group.members[pair.loser].final_image().clone(),
        winner_final: group.members[pair.winner].final_image().clone(),
    }
}

/// Loser context, then the rationale and the winner's tool path.
pub fn build_reflection_trajectory(
    group: &CandidateGroup,
    pair: &ReflectionPair,
    rationale: &str,
    sandbox: &Sandbox,
) -> Result<ReflectionTrajectory, ReflectionError> {
    let loser = &group.members[pair.loser];
    let winner = &group.members[pair.winner];
    let source_image = sandbox.store.get(&group.source).map_err(|e| {
        ReflectionError::Trajectory(TrajectoryError::SchemaViolation {
            path: "source".into(),
            message: e.to_string(),
        })
    })?;
    let rationale = rationale.trim();
    if rationale.is_empty() {
        return Err(ReflectionError::EmptyRationale);
    }
    let think = Think::new(rationale, rationale.split_whitespace().count() as u32);
    let corrective: Vec<ToolStep> = winner.rounds().iter().map(|r| r.tools.clone()).collect();
    Ok(ReflectionTrajectory::new(
        group.source.clone(),
        &source_image,
        group.query.clone(),
        loser.history().clone(),
        loser.self_eval().clone(),
        pair.winner_score,
        think,
        corrective,
        winner.final_image().clone(),
        &sandbox.registry,
    )?)
}

/// Builds one reflection trajectory per group that has a pair. Up to
/// `in_flight` rationale requests run at once; output order follows `groups`.
pub fn reflect_groups(
    groups: &[CandidateGroup],
    client: &dyn RationaleClient,
    sandbox: &Sandbox,
    in_flight: usize,
) -> Result<Vec<ReflectionTrajectory>, ReflectionError> {
    let jobs: Vec<(&CandidateGroup, ReflectionPair)> = groups
        .iter()
        .flat_map(|g| detect_pairs(g).into_iter().map(move |p| (g, p)))
        .collect();
    let mut out = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(in_flight.max(1)) {
        let built = par::map(chunk, |(g, p)| {
            let req = rationale_request(g, p);
            let text = request_rationale(client, &req)?;
            build_reflection_trajectory(g, p, &text, sandbox)
        });
        for t in built {
            out.push(t?);
        }
    }
    Ok(out)
}

/// Writes `trajs` as reflection JSONL records; returns the count.
pub fn export_sft<W: Write>(
    trajs: &[ReflectionTrajectory],
    w: W,
) -> Result<usize, ReflectionError> {
    if trajs.is_empty() {
        return Err(ReflectionError::EmptyDataset);
    }
    let any: Vec<AnyTrajectory> = trajs.iter().cloned().map(AnyTrajectory::from).collect();
    write_jsonl(w, &any).map_err(|e| ReflectionError::Io(e.to_string()))
}
