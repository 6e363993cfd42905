//! Staged data generation: tool-configured image pairs, instructions,
//! per-step reasoning, evaluation scores and a two-tier filter.
//!
//! A [`Record`] accumulates fields as it passes through the stages and
//! carries one [`Provenance`] entry per completed stage. A stage skips
//! records that already carry its entry, which makes every stage
//! idempotent; [`Pipeline::run_stage_resumable`] additionally persists each
//! record as soon as it completes so an interrupted run resumes without
//! repeating client calls.

mod annotator;
mod filter;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

pub use annotator::{AnnotationRequest, Annotator, RemoteAnnotator, ScriptedAnnotator};
pub use filter::{
    automated_verdict, combine, load_reviews, majority, parse_grades, AutoGrades, AutomatedVerdict,
    FilterConfig, FilterVerdict, MAX_REVIEWERS,
};

use crate::agent::Sandbox;
use crate::par;
use crate::policy::parse_output;
use crate::toolbox::{apply_sequence, read_png, ImageRef, ToolCall, ToolError};
use crate::trajectory::{EditHistory, Round, SelfEvaluation, Think, ToolStep};
use crate::wire::{ChatRequest, Message, Part, Speaker};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pairs,
    Instructions,
    Imcot,
    EvalAnnotation,
    Filtering,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Pairs,
        Stage::Instructions,
        Stage::Imcot,
        Stage::EvalAnnotation,
        Stage::Filtering,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pairs => "pairs",
            Stage::Instructions => "instructions",
            Stage::Imcot => "imcot",
            Stage::EvalAnnotation => "eval_annotation",
            Stage::Filtering => "filtering",
        }
    }

    pub fn previous(self) -> Option<Stage> {
        let i = Self::ALL.iter().position(|&s| s == self).expect("listed");
        i.checked_sub(1).map(|j| Self::ALL[j])
    }

    /// Built-in system prompt for the stage's annotator.
    pub fn prompt(self) -> &'static str {
        match self {
            Stage::Pairs => include_str!("../../assets/prompts/datagen/pairs.txt"),
            Stage::Instructions => include_str!("../../assets/prompts/datagen/instructions.txt"),
            Stage::Imcot => include_str!("../../assets/prompts/datagen/imcot.txt"),
            Stage::EvalAnnotation => {
                include_str!("../../assets/prompts/datagen/eval_annotation.txt")
            }
            Stage::Filtering => include_str!("../../assets/prompts/datagen/filtering.txt"),
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DatagenError {
    #[error("annotator unavailable: {0}")]
    ClientUnavailable(String),
    #[error("record {id}: stage {stage} needs {missing}")]
    UpstreamMissing {
        id: String,
        stage: &'static str,
        missing: &'static str,
    },
    #[error("record {id}: malformed {stage} reply: {message}")]
    MalformedReply {
        id: String,
        stage: &'static str,
        message: String,
    },
    #[error("record {id}: tool trace does not reproduce the target")]
    ReplayMismatch { id: String },
    #[error("{path}:{line}: {message}")]
    Schema {
        path: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Tool(#[from] ToolError),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub stage: Stage,
    pub client: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    pub source: ImageRef,
    /// One single-call step per tool configuration entry.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tools: Vec<ToolStep>,
    /// Image after each step; the last one is the target.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub intermediates: Vec<ImageRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<ImageRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    /// One reasoning text per step.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reasoning: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<SelfEvaluation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<FilterVerdict>,
    #[serde(default)]
    pub provenance: Vec<Provenance>,
}

/// A pipeline input line: a source PNG, optionally with a known tool
/// configuration in call syntax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceEntry {
    pub id: String,
    pub source: PathBuf,
    #[serde(default)]
    pub tools: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditingSample {
    pub id: String,
    pub source: ImageRef,
    pub target: ImageRef,
    pub query: String,
    pub trace: EditHistory,
    pub provenance: Vec<Provenance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationSample {
    pub sample: EditingSample,
    pub annotation: SelfEvaluation,
}

fn step_of(call: ToolCall) -> ToolStep {
    let tokens = call.render().split_whitespace().count() as u32;
    ToolStep::new(vec![call], tokens)
}

impl Record {
    pub fn done(&self, stage: Stage) -> bool {
        self.provenance.iter().any(|p| p.stage == stage)
    }

    /// The editing view; checks that the tool trace replays to the target.
    pub fn editing_sample(&self, sandbox: &Sandbox) -> Result<EditingSample, DatagenError> {
        let missing = |what| DatagenError::UpstreamMissing {
            id: self.id.clone(),
            stage: "editing sample",
            missing: what,
        };
        let target = self.target.clone().ok_or_else(|| missing("a target"))?;
        let query = self.query.clone().ok_or_else(|| missing("a query"))?;
        if self.reasoning.len() != self.tools.len() || self.intermediates.len() != self.tools.len()
        {
            return Err(missing("one reasoning text and one intermediate per step"));
        }
        let rounds: Vec<Round> = self
            .tools
            .iter()
            .zip(&self.reasoning)
            .zip(&self.intermediates)
            .map(|((t, c), o)| Round {
                think: Think::new(c.clone(), c.split_whitespace().count() as u32),
                tools: t.clone(),
                observation: o.clone(),
            })
            .collect();
        let trace = EditHistory {
            rounds,
            final_think: Think::new("", 0),
        };
        let source = sandbox.store.get(&self.source)?;
        let replayed =
            trace
                .replay(&source, &sandbox.registry)
                .map_err(|_| DatagenError::ReplayMismatch {
                    id: self.id.clone(),
                })?;
        if !target.matches(&replayed) {
            return Err(DatagenError::ReplayMismatch {
                id: self.id.clone(),
            });
        }
        Ok(EditingSample {
            id: self.id.clone(),
            source: self.source.clone(),
            target,
            query,
            trace,
            provenance: self.provenance.clone(),
        })
    }

    pub fn evaluation_sample(&self, sandbox: &Sandbox) -> Result<EvaluationSample, DatagenError> {
        let annotation = self
            .annotation
            .clone()
            .ok_or(DatagenError::UpstreamMissing {
                id: self.id.clone(),
                stage: "evaluation sample",
                missing: "an annotation",
            })?;
        Ok(EvaluationSample {
            sample: self.editing_sample(sandbox)?,
            annotation,
        })
    }
}

/// Loads source entries and stores their images in the sandbox.
pub fn records_from_sources(
    entries: &[SourceEntry],
    base: &Path,
    sandbox: &Sandbox,
) -> Result<Vec<Record>, DatagenError> {
    entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let path = if e.source.is_absolute() {
                e.source.clone()
            } else {
                base.join(&e.source)
            };
            let img = read_png(&path)?;
            let tools = e
                .tools
                .iter()
                .map(|t| {
                    ToolCall::parse(t)
                        .map(step_of)
                        .map_err(|err| DatagenError::Schema {
                            path: e.id.clone(),
                            line: i + 1,
                            message: err.to_string(),
                        })
                })
                .collect::<Result<_, _>>()?;
            Ok(Record {
                id: e.id.clone(),
                source: sandbox.store.put(&img)?,
                tools,
                intermediates: vec![],
                target: None,
                query: None,
                reasoning: vec![],
                annotation: None,
                verdict: None,
                provenance: vec![],
            })
        })
        .collect()
}

/// Reads JSONL into `T`. With `tolerate_tail`, an unparsable final line
/// (a record cut short by an interrupted write) is dropped.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(
    path: &Path,
    tolerate_tail: bool,
) -> Result<Vec<T>, DatagenError> {
    let file = std::fs::File::open(path)
        .map_err(|e| DatagenError::Io(format!("{}: {e}", path.display())))?;
    let lines: Vec<String> = std::io::BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(|e| DatagenError::Io(e.to_string()))?;
    let last = lines.iter().rposition(|l| !l.trim().is_empty());
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let de = &mut serde_json::Deserializer::from_str(line);
        match serde_path_to_error::deserialize(de) {
            Ok(v) => out.push(v),
            Err(_) if tolerate_tail && Some(i) == last => {}
            Err(e) => {
                return Err(DatagenError::Schema {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

fn write_line<W: Write>(w: &mut W, r: &Record) -> Result<(), DatagenError> {
    let line = serde_json::to_string(r).map_err(|e| DatagenError::Io(e.to_string()))?;
    writeln!(w, "{line}")
        .and_then(|_| w.flush())
        .map_err(|e| DatagenError::Io(e.to_string()))
}

/// Writes `records` to `path` through a temporary file and a rename.
pub fn write_records(path: &Path, records: &[Record]) -> Result<(), DatagenError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let io = |e: std::io::Error| DatagenError::Io(format!("{}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    for r in records {
        write_line(&mut tmp, r)?;
    }
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub records: Vec<Record>,
    pub processed: usize,
    pub skipped: usize,
}

pub struct Pipeline<'a> {
    pub sandbox: &'a Sandbox,
    pub annotator: &'a dyn Annotator,
    pub filter: FilterConfig,
    /// Manual reviewer verdicts by record id.
    pub reviews: BTreeMap<String, Vec<bool>>,
}

impl<'a> Pipeline<'a> {
    pub fn new(sandbox: &'a Sandbox, annotator: &'a dyn Annotator) -> Self {
        Self {
            sandbox,
            annotator,
            filter: FilterConfig::default(),
            reviews: BTreeMap::new(),
        }
    }

    fn image(&self, r: &ImageRef) -> Result<Part, DatagenError> {
        Ok(Part::image(&*self.sandbox.store.get(r)?))
    }

    fn chat(system: String, content: Vec<Part>) -> ChatRequest {
        ChatRequest {
            messages: vec![
                Message::new(Speaker::System, vec![Part::text(system)]),
                Message::new(Speaker::User, content),
            ],
            max_tokens: None,
        }
    }

    fn ask(
        &self,
        stage: Stage,
        key: String,
        system: String,
        content: Vec<Part>,
    ) -> Result<String, DatagenError> {
        self.annotator.annotate(&AnnotationRequest {
            stage,
            key,
            chat: Self::chat(system, content),
        })
    }

    /// Processes every record not yet through `stage`, in parallel; the
    /// rest pass through unchanged. Output order follows `batch`.
    pub fn run_stage(&self, stage: Stage, batch: Vec<Record>) -> Result<Vec<Record>, DatagenError> {
        par::map(&batch, |r| {
            if r.done(stage) {
                Ok(r.clone())
            } else {
                self.process(stage, r)
            }
        })
        .into_iter()
        .collect()
    }

    /// [`run_stage`](Self::run_stage) with durable progress in `out`.
    /// Records already completed in `out` are reused without client calls;
    /// each newly completed record is appended to `out` before the next
    /// result is awaited, and `out` is rewritten in batch order at the end.
    pub fn run_stage_resumable(
        &self,
        stage: Stage,
        batch: Vec<Record>,
        out: &Path,
    ) -> Result<StageReport, DatagenError> {
        let mut prior: BTreeMap<String, Record> = BTreeMap::new();
        if out.exists() {
            for r in read_jsonl::<Record>(out, true)? {
                if r.done(stage) {
                    prior.insert(r.id.clone(), r);
                }
            }
        }
        // drops any cut-off tail before appending
        write_records(out, &prior.values().cloned().collect::<Vec<_>>())?;
        let log = Mutex::new(
            std::fs::OpenOptions::new()
                .append(true)
                .open(out)
                .map_err(|e| DatagenError::Io(format!("{}: {e}", out.display())))?,
        );
        let skipped = batch
            .iter()
            .filter(|r| r.done(stage) || prior.contains_key(&r.id))
            .count();
        let results = par::map(&batch, |r| -> Result<Record, DatagenError> {
            if let Some(p) = prior.get(&r.id) {
                return Ok(p.clone());
            }
            if r.done(stage) {
                return Ok(r.clone());
            }
            let done = self.process(stage, r)?;
            write_line(&mut *log.lock().expect("log lock"), &done)?;
            Ok(done)
        });
        let records = results.into_iter().collect::<Result<Vec<_>, _>>()?;
        write_records(out, &records)?;
        Ok(StageReport {
            processed: records.len() - skipped,
            skipped,
            records,
        })
    }

    fn process(&self, stage: Stage, r: &Record) -> Result<Record, DatagenError> {
        let mut r = r.clone();
        match stage {
            Stage::Pairs => self.pairs(&mut r)?,
            Stage::Instructions => self.instructions(&mut r)?,
            Stage::Imcot => self.imcot(&mut r)?,
            Stage::EvalAnnotation => self.eval_annotation(&mut r)?,
            Stage::Filtering => self.filtering(&mut r)?,
        }
        r.provenance.push(Provenance {
            stage,
            client: self.annotator.name(),
        });
        Ok(r)
    }

    fn malformed(r: &Record, stage: Stage, message: impl Into<String>) -> DatagenError {
        DatagenError::MalformedReply {
            id: r.id.clone(),
            stage: stage.as_str(),
            message: message.into(),
        }
    }

    fn require<T>(
        r: &Record,
        stage: Stage,
        v: Option<T>,
        missing: &'static str,
    ) -> Result<T, DatagenError> {
        v.ok_or(DatagenError::UpstreamMissing {
            id: r.id.clone(),
            stage: stage.as_str(),
            missing,
        })
    }

    /// Known tool configurations are replayed; otherwise the annotator
    /// proposes one call per line.
    fn pairs(&self, r: &mut Record) -> Result<(), DatagenError> {
        let stage = Stage::Pairs;
        if r.tools.is_empty() {
            let system = format!(
                "{}\nTool list:\n{}",
                stage.prompt(),
                self.sandbox.registry.to_toml()
            );
            let reply = self.ask(stage, r.id.clone(), system, vec![self.image(&r.source)?])?;
            r.tools = reply
                .lines()
                .map(str::trim)
                .filter(|l| l.starts_with('{'))
                .map(|l| {
                    ToolCall::parse(l)
                        .map(step_of)
                        .map_err(|e| Self::malformed(r, stage, e.to_string()))
                })
                .collect::<Result<_, _>>()?;
            if r.tools.is_empty() {
                return Err(Self::malformed(r, stage, "no tool calls"));
            }
        }
        let calls: Vec<ToolCall> = r.tools.iter().flat_map(|t| t.calls.clone()).collect();
        let source = self.sandbox.store.get(&r.source)?;
        let (_, steps) = apply_sequence(&source, &calls, &self.sandbox.registry)
            .map_err(|e| Self::malformed(r, stage, e.to_string()))?;
        r.intermediates = steps
            .iter()
            .map(|img| self.sandbox.store.put(img))
            .collect::<Result<_, _>>()?;
        r.target = r.intermediates.last().cloned();
        Ok(())
    }

    fn tool_text(r: &Record) -> String {
        r.tools
            .iter()
            .flat_map(|t| &t.calls)
            .map(ToolCall::render)
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn instructions(&self, r: &mut Record) -> Result<(), DatagenError> {
        let stage = Stage::Instructions;
        let target = Self::require(r, stage, r.target.clone(), "a target image")?;
        let content = vec![
            Part::text("Original photo:"),
            self.image(&r.source)?,
            Part::text("Retouched photo:"),
            self.image(&target)?,
            Part::text(format!("Tool calls:\n{}", Self::tool_text(r))),
        ];
        let reply = self.ask(stage, r.id.clone(), stage.prompt().to_string(), content)?;
        let q = reply.trim();
        if q.is_empty() {
            return Err(Self::malformed(r, stage, "empty instruction"));
        }
        r.query = Some(q.to_string());
        Ok(())
    }

    /// The step-`t` request: `[global]` request and target, `[local]` the
    /// images around step `t` and its calls, `[history]` earlier reasoning.
    pub fn imcot_request(
        &self,
        r: &Record,
        t: usize,
        history: &[String],
    ) -> Result<ChatRequest, DatagenError> {
        let stage = Stage::Imcot;
        let query = Self::require(r, stage, r.query.as_ref(), "a query")?;
        let target = Self::require(r, stage, r.target.as_ref(), "a target image")?;
        let before = if t == 0 {
            &r.source
        } else {
            &r.intermediates[t - 1]
        };
        let calls: Vec<String> = r.tools[t].calls.iter().map(ToolCall::render).collect();
        let mut content = vec![
            Part::text("[global]"),
            Part::text(format!("Request: {query}")),
            self.image(target)?,
            Part::text("[local]"),
            self.image(before)?,
            self.image(&r.intermediates[t])?,
            Part::text(format!("Tool calls: {}", calls.join(" "))),
            Part::text("[history]"),
        ];
        content.extend(
            history
                .iter()
                .enumerate()
                .map(|(i, c)| Part::text(format!("Step {i}: {c}"))),
        );
        Ok(Self::chat(stage.prompt().to_string(), content))
    }

    /// Reasoning for step `t` given the reasoning of steps `0..t`.
    pub fn annotate_imcot(
        &self,
        r: &Record,
        t: usize,
        history: &[String],
    ) -> Result<String, DatagenError> {
        let stage = Stage::Imcot;
        let reply = self.annotator.annotate(&AnnotationRequest {
            stage,
            key: format!("{}/{t}", r.id),
            chat: self.imcot_request(r, t, history)?,
        })?;
        let c = reply.trim();
        if c.is_empty() {
            return Err(Self::malformed(
                r,
                stage,
                format!("empty reasoning for step {t}"),
            ));
        }
        Ok(c.to_string())
    }

    fn imcot(&self, r: &mut Record) -> Result<(), DatagenError> {
        let stage = Stage::Imcot;
        Self::require(
            r,
            stage,
            (!r.tools.is_empty()).then_some(()),
            "a tool trace",
        )?;
        Self::require(
            r,
            stage,
            (r.intermediates.len() == r.tools.len()).then_some(()),
            "one intermediate image per step",
        )?;
        let mut reasoning = Vec::with_capacity(r.tools.len());
        for t in 0..r.tools.len() {
            let c = self.annotate_imcot(r, t, &reasoning)?;
            reasoning.push(c);
        }
        r.reasoning = reasoning;
        Ok(())
    }

    fn eval_annotation(&self, r: &mut Record) -> Result<(), DatagenError> {
        let stage = Stage::EvalAnnotation;
        let query = Self::require(r, stage, r.query.clone(), "a query")?;
        let target = Self::require(r, stage, r.target.clone(), "a target image")?;
        Self::require(
            r,
            stage,
            (!r.reasoning.is_empty()).then_some(()),
            "step reasoning",
        )?;
        let content = vec![
            self.image(&r.source)?,
            Part::text(format!("Request: {query}")),
            self.image(&target)?,
        ];
        let reply = self.ask(stage, r.id.clone(), stage.prompt().to_string(), content)?;
        let parsed = parse_output(&reply, None);
        let (answer_rationale, score, _) = parsed
            .answer()
            .ok_or_else(|| Self::malformed(r, stage, "no scored answer"))?;
        let rationale = parsed
            .think()
            .map(|(t, _)| t.trim().to_string())
            .filter(|t| !t.is_empty());
        let rationale = rationale.unwrap_or_else(|| answer_rationale.trim().to_string());
        r.annotation = Some(
            SelfEvaluation::new(rationale, score)
                .map_err(|e| Self::malformed(r, stage, e.to_string()))?,
        );
        Ok(())
    }

    fn filtering(&self, r: &mut Record) -> Result<(), DatagenError> {
        let stage = Stage::Filtering;
        let annotation = Self::require(r, stage, r.annotation.clone(), "an annotation")?;
        let target = Self::require(r, stage, r.target.clone(), "a target image")?;
        let content = vec![
            self.image(&r.source)?,
            Part::text(format!("Request: {}", r.query.as_deref().unwrap_or(""))),
            self.image(&target)?,
            Part::text(format!("Step explanations:\n{}", r.reasoning.join("\n"))),
            Part::text(format!("Reviewer score: {}", annotation.score())),
        ];
        let reply = self.ask(stage, r.id.clone(), stage.prompt().to_string(), content)?;
        let grades = parse_grades(&reply).map_err(|m| Self::malformed(r, stage, m))?;
        r.verdict = Some(combine(
            automated_verdict(grades, &self.filter),
            self.reviews.get(&r.id).map(Vec::as_slice),
        ));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::toolbox::{write_png, ImageBuffer, MemoryStore, Registry};

    pub(crate) fn sandbox() -> Sandbox {
        Sandbox::new(Arc::new(Registry::builtin()), Arc::new(MemoryStore::new()))
    }

    fn source_record(sb: &Sandbox, id: &str, tools: &[&str]) -> Record {
        let img = ImageBuffer::from_fn(4, 4, |x, y| {
            [0.2 + 0.1 * f64::from(x), 0.3, 0.2 + 0.05 * f64::from(y)]
        })
        .quantized();
        Record {
            id: id.into(),
            source: sb.store.put(&img).unwrap(),
            tools: tools
                .iter()
                .map(|t| step_of(ToolCall::parse(t).unwrap()))
                .collect(),
            intermediates: vec![],
            target: None,
            query: None,
            reasoning: vec![],
            annotation: None,
            verdict: None,
            provenance: vec![],
        }
    }

    fn full_script() -> ScriptedAnnotator {
        ScriptedAnnotator::new()
            .reply(Stage::Pairs, "{exposure, ev: 0.3}\n{saturation, s: 10}")
            .reply(Stage::Instructions, "a touch brighter and more vivid")
            .reply_for(Stage::Imcot, "a/0", "The photo is dim, so I lift exposure.")
            .reply_for(
                Stage::Imcot,
                "a/1",
                "Colours are flat; a little saturation helps.",
            )
            .reply(
                Stage::EvalAnnotation,
                "<think>bright and vivid as asked</think><answer>score: 4.5</answer>",
            )
            .reply(
                Stage::Filtering,
                "{\"adherence\": 9, \"aesthetics\": 8, \"consistency\": 9}",
            )
    }

    fn run_all(p: &Pipeline<'_>, batch: Vec<Record>) -> Vec<Record> {
        Stage::ALL
            .into_iter()
            .fold(batch, |b, s| p.run_stage(s, b).unwrap())
    }

    #[test]
    fn pairs_stage_adds_target_and_tools() {
        let sb = sandbox();
        let ann = full_script();
        let p = Pipeline::new(&sb, &ann);
        let out = p
            .run_stage(Stage::Pairs, vec![source_record(&sb, "a", &[])])
            .unwrap();
        let r = &out[0];
        assert_eq!(r.tools.len(), 2);
        assert_eq!(r.intermediates.len(), 2);
        assert_eq!(r.target.as_ref(), r.intermediates.last());
        assert_eq!(ann.calls(), 1);
        // known configurations are replayed without a client call
        let known = p
            .run_stage(
                Stage::Pairs,
                vec![source_record(&sb, "k", &["{contrast, c: 10}"])],
            )
            .unwrap();
        assert_eq!(ann.calls(), 1);
        assert!(known[0].target.is_some());
    }

    #[test]
    fn full_pipeline_emits_replayable_samples() {
        let sb = sandbox();
        let ann = full_script();
        let p = Pipeline::new(&sb, &ann);
        let out = run_all(&p, vec![source_record(&sb, "a", &[])]);
        let r = &out[0];
        assert_eq!(r.reasoning.len(), 2);
        assert_eq!(r.provenance.len(), 5);
        assert!(r.verdict.as_ref().unwrap().final_pass);
        let e = r.evaluation_sample(&sb).unwrap();
        assert_eq!(e.annotation.score(), 4.5);
        assert_eq!(e.annotation.rationale(), "bright and vivid as asked");
        assert_eq!(e.sample.trace.rounds.len(), 2);
        // 1 pairs + 1 instructions + 2 imcot + 1 eval + 1 filtering
        assert_eq!(ann.calls(), 6);
        let again = run_all(&p, out.clone());
        assert_eq!(again, out);
        assert_eq!(ann.calls(), 6);

        let mut tampered = r.clone();
        tampered.target = Some(tampered.source.clone());
        assert_eq!(
            tampered.editing_sample(&sb),
            Err(DatagenError::ReplayMismatch { id: "a".into() })
        );
    }

    #[test]
    fn imcot_requests_carry_three_blocks() {
        let sb = sandbox();
        let ann = full_script();
        let p = Pipeline::new(&sb, &ann);
        let batch = [Stage::Pairs, Stage::Instructions, Stage::Imcot]
            .into_iter()
            .fold(vec![source_record(&sb, "a", &[])], |b, s| {
                p.run_stage(s, b).unwrap()
            });
        let imcot: Vec<_> = ann
            .transcript()
            .into_iter()
            .filter(|t| t.stage == Stage::Imcot)
            .collect();
        assert_eq!(imcot.len(), 2);
        let labels = |req: &AnnotationRequest| -> Vec<String> {
            req.chat.messages[1]
                .content
                .iter()
                .map(|p| match p {
                    Part::Text { text } => text.clone(),
                    Part::Image { .. } => "<img>".into(),
                })
                .collect()
        };
        let step0 = labels(&imcot[0]);
        assert_eq!(
            step0,
            vec![
                "[global]",
                "Request: a touch brighter and more vivid",
                "<img>",
                "[local]",
                "<img>",
                "<img>",
                "Tool calls: {exposure, ev: 0.3}",
                "[history]"
            ]
        );
        let step1 = labels(&imcot[1]);
        assert_eq!(
            step1.last().unwrap(),
            "Step 0: The photo is dim, so I lift exposure."
        );
        assert_eq!(step1.iter().position(|s| s == "[history]"), Some(7));
        assert_eq!(
            batch[0].reasoning[1],
            "Colours are flat; a little saturation helps."
        );
    }

    #[test]
    fn upstream_and_client_errors() {
        let sb = sandbox();
        let ann = ScriptedAnnotator::new();
        let p = Pipeline::new(&sb, &ann);
        let err = p
            .run_stage(Stage::Imcot, vec![source_record(&sb, "a", &[])])
            .unwrap_err();
        assert!(
            matches!(
                err,
                DatagenError::UpstreamMissing {
                    missing: "a tool trace",
                    ..
                }
            ),
            "{err}"
        );
        let err = p
            .run_stage(Stage::Pairs, vec![source_record(&sb, "a", &[])])
            .unwrap_err();
        assert!(matches!(err, DatagenError::ClientUnavailable(_)));
        let bad = ScriptedAnnotator::new().reply(Stage::Pairs, "{nosuchtool, x: 1}");
        let err = Pipeline::new(&sb, &bad)
            .run_stage(Stage::Pairs, vec![source_record(&sb, "a", &[])])
            .unwrap_err();
        assert!(matches!(err, DatagenError::MalformedReply { .. }));
    }

    #[test]
    fn filtering_uses_reviews() {
        let sb = sandbox();
        let ann = full_script();
        let mut p = Pipeline::new(&sb, &ann);
        p.reviews.insert("a".into(), vec![true, false, false]);
        let out = run_all(&p, vec![source_record(&sb, "a", &[])]);
        let v = out[0].verdict.as_ref().unwrap();
        assert!(v.automated.pass && !v.final_pass);
        assert_eq!(v.manual.len(), 3);
    }

    #[test]
    fn resume_skips_completed_records() {
        let dir = tempfile::tempdir().unwrap();
        let sb = sandbox();
        let ann = ScriptedAnnotator::new().reply(Stage::Pairs, "{exposure, ev: 0.2}");
        let p = Pipeline::new(&sb, &ann);
        let batch: Vec<Record> = ["a", "b", "c"]
            .iter()
            .map(|id| source_record(&sb, id, &[]))
            .collect();
        let out = dir.path().join("pairs.jsonl");

        // simulate an interrupt: one record finished, a second cut off mid-line
        let first = p.run_stage(Stage::Pairs, vec![batch[0].clone()]).unwrap();
        let mut text = serde_json::to_string(&first[0]).unwrap() + "\n";
        text += &serde_json::to_string(&source_record(&sb, "b", &[])).unwrap()[..40];
        std::fs::write(&out, text).unwrap();
        let calls_before = ann.calls();

        let report = p
            .run_stage_resumable(Stage::Pairs, batch.clone(), &out)
            .unwrap();
        assert_eq!((report.processed, report.skipped), (2, 1));
        assert_eq!(ann.calls() - calls_before, 2);
        let on_disk: Vec<Record> = read_jsonl(&out, false).unwrap();
        assert_eq!(on_disk, report.records);

        let rerun = p.run_stage_resumable(Stage::Pairs, batch, &out).unwrap();
        assert_eq!((rerun.processed, rerun.skipped), (0, 3));
        assert_eq!(ann.calls() - calls_before, 2);
        assert_eq!(rerun.records, report.records);
    }

    #[test]
    fn sources_load_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let sb = sandbox();
        write_png(
            &dir.path().join("x.png"),
            &ImageBuffer::uniform(2, 2, [0.5; 3]),
        )
        .unwrap();
        let entries = vec![SourceEntry {
            id: "x".into(),
            source: "x.png".into(),
            tools: vec!["{exposure, ev: 0.1}".into()],
        }];
        let recs = records_from_sources(&entries, dir.path(), &sb).unwrap();
        assert_eq!(recs[0].tools.len(), 1);
        assert_eq!(
            "eval_annotation".parse::<Stage>().unwrap(),
            Stage::EvalAnnotation
        );
        assert_eq!(Stage::Imcot.previous(), Some(Stage::Instructions));
        assert_eq!(Stage::Pairs.previous(), None);
    }
}
