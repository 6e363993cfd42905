//! JSONL record format (schema 1).
//!
//! Field order is fixed by the record structs, so serializing a parsed
//! record reproduces the original bytes.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::*;
use crate::toolbox::ToolCall;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Edit,
    Eval,
    Reflection,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyTrajectory {
    Edit(EditTrajectory),
    Eval(EvalTrajectory),
    Reflection(ReflectionTrajectory),
}

impl AnyTrajectory {
    pub fn kind(&self) -> TrajectoryKind {
        match self {
            AnyTrajectory::Edit(_) => TrajectoryKind::Edit,
            AnyTrajectory::Eval(_) => TrajectoryKind::Eval,
            AnyTrajectory::Reflection(_) => TrajectoryKind::Reflection,
        }
    }
}

impl From<EditTrajectory> for AnyTrajectory {
    fn from(t: EditTrajectory) -> Self {
        AnyTrajectory::Edit(t)
    }
}

impl From<EvalTrajectory> for AnyTrajectory {
    fn from(t: EvalTrajectory) -> Self {
        AnyTrajectory::Eval(t)
    }
}

impl From<ReflectionTrajectory> for AnyTrajectory {
    fn from(t: ReflectionTrajectory) -> Self {
        AnyTrajectory::Reflection(t)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    schema: u32,
    kind: TrajectoryKind,
    source: ImageRef,
    query: String,
    rounds: Vec<RoundRecord>,
    final_think: String,
    self_eval: SelfEvalRecord,
    token_counts: TokenCounts,
    image_hashes: Vec<ContentHash>,
    format_ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max_rounds: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reflection: Option<ReflectionRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RoundRecord {
    think: String,
    tool_calls: Vec<ToolCall>,
    observation: ImageRef,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SelfEvalRecord {
    rationale: String,
    score: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenCounts {
    think: Vec<u32>,
    tool_call: Vec<u32>,
    final_think: u32,
    self_eval_rationale: u32,
    self_eval_answer: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reflection: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    corrective_tool_call: Option<Vec<u32>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReflectionRecord {
    rationale: String,
    winner_score: f64,
    corrective_tools: Vec<Vec<ToolCall>>,
    target: ImageRef,
}

fn history_parts(h: &EditHistory) -> (Vec<RoundRecord>, Vec<u32>, Vec<u32>, Vec<ContentHash>) {
    let rounds = h
        .rounds
        .iter()
        .map(|r| RoundRecord {
            think: r.think.text.clone(),
            tool_calls: r.tools.calls.clone(),
            observation: r.observation.clone(),
        })
        .collect();
    let think = h.rounds.iter().map(|r| r.think.tokens).collect();
    let tools = h.rounds.iter().map(|r| r.tools.tokens).collect();
    let hashes = h.rounds.iter().map(|r| r.observation.hash).collect();
    (rounds, think, tools, hashes)
}

fn to_record(t: &AnyTrajectory) -> Record {
    let (source, query, history, eval, format_ok) = match t {
        AnyTrajectory::Edit(e) => (&e.source, &e.query, &e.history, &e.self_eval, e.format_ok),
        AnyTrajectory::Eval(e) => (&e.source, &e.query, &e.history, &e.prediction, e.format_ok),
        AnyTrajectory::Reflection(r) => {
            (&r.source, &r.query, &r.loser_history, &r.loser_eval, true)
        }
    };
    let (rounds, think, tool_call, mut image_hashes) = history_parts(history);
    let mut token_counts = TokenCounts {
        think,
        tool_call,
        final_think: history.final_think.tokens,
        self_eval_rationale: eval.rationale_tokens,
        self_eval_answer: eval.answer_tokens,
        reflection: None,
        corrective_tool_call: None,
    };
    let mut max_rounds = None;
    let mut reflection = None;
    match t {
        AnyTrajectory::Edit(e) => max_rounds = Some(e.max_rounds),
        AnyTrajectory::Eval(_) => {}
        AnyTrajectory::Reflection(r) => {
            token_counts.reflection = Some(r.rationale.tokens);
            token_counts.corrective_tool_call =
                Some(r.corrective_tools.iter().map(|s| s.tokens).collect());
            image_hashes.push(r.target.hash);
            reflection = Some(ReflectionRecord {
                rationale: r.rationale.text.clone(),
                winner_score: r.winner_score,
                corrective_tools: r.corrective_tools.iter().map(|s| s.calls.clone()).collect(),
                target: r.target.clone(),
            });
        }
    }
    Record {
        schema: SCHEMA_VERSION,
        kind: t.kind(),
        source: source.clone(),
        query: query.clone(),
        rounds,
        final_think: history.final_think.text.clone(),
        self_eval: SelfEvalRecord {
            rationale: eval.eval.rationale.clone(),
            score: eval.eval.score,
        },
        token_counts,
        image_hashes,
        format_ok,
        max_rounds,
        reflection,
    }
}

/// One JSON line (no trailing newline).
pub fn serialize(t: &AnyTrajectory) -> String {
    serde_json::to_string(&to_record(t)).expect("trajectory records serialize")
}

fn violation(path: &str, message: impl Into<String>) -> TrajectoryError {
    TrajectoryError::SchemaViolation {
        path: path.to_string(),
        message: message.into(),
    }
}

fn join(parent: &str, field: &str) -> String {
    if parent.is_empty() || parent == "." {
        field.to_string()
    } else {
        format!("{parent}.{field}")
    }
}

pub fn parse(line: &str) -> Result<AnyTrajectory, TrajectoryError> {
    let de = &mut serde_json::Deserializer::from_str(line);
    let rec: Record = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let msg = e.inner().to_string();
        // serde reports a missing field at its parent; point at the field itself
        match msg
            .strip_prefix("missing field `")
            .and_then(|r| r.split('`').next())
        {
            Some(field) => violation(&join(&path, field), msg.clone()),
            None => violation(&path, msg),
        }
    })?;
    from_record(rec)
}

fn from_record(rec: Record) -> Result<AnyTrajectory, TrajectoryError> {
    if rec.schema != SCHEMA_VERSION {
        return Err(violation(
            "schema",
            format!("unsupported schema {}", rec.schema),
        ));
    }
    let n = rec.rounds.len();
    if rec.token_counts.think.len() != n {
        return Err(violation(
            "token_counts.think",
            "length differs from rounds",
        ));
    }
    if rec.token_counts.tool_call.len() != n {
        return Err(violation(
            "token_counts.tool_call",
            "length differs from rounds",
        ));
    }
    let eval =
        SelfEvaluation::new(rec.self_eval.rationale, rec.self_eval.score).map_err(|e| match e {
            TrajectoryError::EmptyRationale => violation("self_eval.rationale", e.to_string()),
            _ => violation("self_eval.score", e.to_string()),
        })?;
    let eval_seg = SelfEvalSegment::new(
        eval,
        rec.token_counts.self_eval_rationale,
        rec.token_counts.self_eval_answer,
    );
    let mut rounds = Vec::with_capacity(n);
    for (i, r) in rec.rounds.into_iter().enumerate() {
        if r.tool_calls.is_empty() {
            return Err(violation(
                &format!("rounds[{i}].tool_calls"),
                "at least one call required",
            ));
        }
        rounds.push(Round {
            think: Think::new(r.think, rec.token_counts.think[i]),
            tools: ToolStep::new(r.tool_calls, rec.token_counts.tool_call[i]),
            observation: r.observation,
        });
    }
    let history = EditHistory {
        rounds,
        final_think: Think::new(rec.final_think, rec.token_counts.final_think),
    };
    let mut expected_hashes: Vec<ContentHash> =
        history.rounds.iter().map(|r| r.observation.hash).collect();
    if let Some(refl) = &rec.reflection {
        expected_hashes.push(refl.target.hash);
    }
    if expected_hashes != rec.image_hashes {
        return Err(violation(
            "image_hashes",
            "does not match the referenced images",
        ));
    }
    match rec.kind {
        TrajectoryKind::Edit => {
            let max_rounds = rec
                .max_rounds
                .ok_or_else(|| violation("max_rounds", "required for edit records"))?;
            if n > max_rounds as usize {
                return Err(violation(
                    "rounds",
                    format!("{n} rounds exceed max_rounds {max_rounds}"),
                ));
            }
            if n == 0 && rec.format_ok {
                return Err(violation(
                    "rounds",
                    "well-formed edit trajectories need at least one round",
                ));
            }
            Ok(AnyTrajectory::Edit(EditTrajectory {
                source: rec.source,
                query: rec.query,
                history,
                self_eval: eval_seg,
                max_rounds,
                format_ok: rec.format_ok,
            }))
        }
        TrajectoryKind::Eval => Ok(AnyTrajectory::Eval(EvalTrajectory {
            source: rec.source,
            query: rec.query,
            history,
            prediction: eval_seg,
            format_ok: rec.format_ok,
        })),
        TrajectoryKind::Reflection => {
            let refl = rec
                .reflection
                .ok_or_else(|| violation("reflection", "required for reflection records"))?;
            let rationale_tokens = rec.token_counts.reflection.ok_or_else(|| {
                violation("token_counts.reflection", "required for reflection records")
            })?;
            let corrective_tokens = rec.token_counts.corrective_tool_call.ok_or_else(|| {
                violation(
                    "token_counts.corrective_tool_call",
                    "required for reflection records",
                )
            })?;
            if corrective_tokens.len() != refl.corrective_tools.len() {
                return Err(violation(
                    "token_counts.corrective_tool_call",
                    "length differs from corrective_tools",
                ));
            }
            if eval_seg.score() >= refl.winner_score {
                return Err(violation(
                    "reflection.winner_score",
                    "must exceed the loser score",
                ));
            }
            Ok(AnyTrajectory::Reflection(ReflectionTrajectory {
                source: rec.source,
                query: rec.query,
                loser_history: history,
                loser_eval: eval_seg,
                winner_score: refl.winner_score,
                rationale: Think::new(refl.rationale, rationale_tokens),
                corrective_tools: refl
                    .corrective_tools
                    .into_iter()
                    .zip(corrective_tokens)
                    .map(|(calls, tokens)| ToolStep::new(calls, tokens))
                    .collect(),
                target: refl.target,
            }))
        }
    }
}

pub fn write_jsonl<'a, W: Write>(
    mut w: W,
    trajs: impl IntoIterator<Item = &'a AnyTrajectory>,
) -> std::io::Result<usize> {
    let mut n = 0;
    for t in trajs {
        writeln!(w, "{}", serialize(t))?;
        n += 1;
    }
    w.flush()?;
    Ok(n)
}

/// Parses every non-empty line; errors carry the 1-based line number in the path.
pub fn parse_jsonl<R: BufRead>(r: R) -> Result<Vec<AnyTrajectory>, TrajectoryError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| violation(&format!("line {}", i + 1), e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(&line).map_err(|e| match e {
            TrajectoryError::SchemaViolation { path, message } => {
                TrajectoryError::SchemaViolation {
                    path: format!("line {}: {path}", i + 1),
                    message,
                }
            }
            other => other,
        })?);
    }
    Ok(out)
}
