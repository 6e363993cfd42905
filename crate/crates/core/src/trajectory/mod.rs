//! Interleaved reasoning / tool-call / observation trajectories.
//!
//! An editing trajectory is built round by round through
//! [`EditTrajectoryBuilder`], which replays every tool call in the sandbox
//! and refuses observations whose content hash disagrees with the replay.
//! Finalized trajectories ([`EditTrajectory`], [`EvalTrajectory`],
//! [`ReflectionTrajectory`]) are immutable; reward and advantage code only
//! accepts these, so the "not finalized" state cannot reach it.
//!
//! Token counts are stored per segment when the segment is created and
//! never recomputed here.

mod record;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::toolbox::{execute_lenient, ContentHash, ImageBuffer, ImageRef, Registry, ToolCall};

pub use record::{
    parse, parse_jsonl, serialize, write_jsonl, AnyTrajectory, TrajectoryKind, SCHEMA_VERSION,
};

/// Default round budget of the editing loop.
pub const DEFAULT_MAX_ROUNDS: u32 = 4;

pub const MIN_SCORE: f64 = 1.0;
pub const MAX_SCORE: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrajectoryError {
    #[error("round limit of {max} exceeded")]
    RoundLimitExceeded { max: u32 },
    #[error("observation of round {round} has hash {recorded:?}, replay produced {replayed:?}")]
    ObservationMismatch {
        round: usize,
        recorded: ContentHash,
        replayed: ContentHash,
    },
    #[error("source reference does not match the supplied image")]
    SourceMismatch,
    #[error("a tool-call segment needs at least one call")]
    EmptyToolStep,
    #[error("trajectory has no rounds")]
    NoRounds,
    #[error("score {0} outside [1, 5]")]
    ScoreOutOfRange(f64),
    #[error("self-evaluation rationale is empty")]
    EmptyRationale,
    #[error("loser score {loser} is not below winner score {winner}")]
    NotDominated { loser: f64, winner: f64 },
    #[error("corrective tools replay to {replayed:?}, target is {target:?}")]
    ReplayMismatch {
        target: ContentHash,
        replayed: ContentHash,
    },
    #[error("schema violation at `{path}`: {message}")]
    SchemaViolation { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Think,
    ToolCall,
    Observation,
    SelfEval,
    Reflection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Think {
    pub text: String,
    pub tokens: u32,
}

impl Think {
    pub fn new(text: impl Into<String>, tokens: u32) -> Self {
        Self {
            text: text.into(),
            tokens,
        }
    }
}

/// One `<tool_call>` turn: the calls issued and the tokens spent on them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolStep {
    pub calls: Vec<ToolCall>,
    pub tokens: u32,
}

impl ToolStep {
    pub fn new(calls: Vec<ToolCall>, tokens: u32) -> Self {
        Self { calls, tokens }
    }
}

/// Overall aesthetic and instruction-adherence judgement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfEvaluation {
    rationale: String,
    score: f64,
}

impl SelfEvaluation {
    pub fn new(rationale: impl Into<String>, score: f64) -> Result<Self, TrajectoryError> {
        let rationale = rationale.into();
        if !(MIN_SCORE..=MAX_SCORE).contains(&score) {
            return Err(TrajectoryError::ScoreOutOfRange(score));
        }
        if rationale.trim().is_empty() {
            return Err(TrajectoryError::EmptyRationale);
        }
        Ok(Self { rationale, score })
    }

    pub fn rationale(&self) -> &str {
        &self.rationale
    }

    pub fn score(&self) -> f64 {
        self.score
    }
}

/// A self-evaluation as generated by the policy, with its token cost split
/// into the rationale part and the answer (score) part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfEvalSegment {
    pub eval: SelfEvaluation,
    pub rationale_tokens: u32,
    pub answer_tokens: u32,
}

impl SelfEvalSegment {
    pub fn new(eval: SelfEvaluation, rationale_tokens: u32, answer_tokens: u32) -> Self {
        Self {
            eval,
            rationale_tokens,
            answer_tokens,
        }
    }

    pub fn tokens(&self) -> u64 {
        u64::from(self.rationale_tokens) + u64::from(self.answer_tokens)
    }

    pub fn score(&self) -> f64 {
        self.eval.score
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Segment {
    Think(Think),
    ToolCall(ToolStep),
    Observation(ImageRef),
    SelfEval(SelfEvalSegment),
    Reflection(Think),
}

impl Segment {
    pub fn role(&self) -> Role {
        match self {
            Segment::Think(_) => Role::Think,
            Segment::ToolCall(_) => Role::ToolCall,
            Segment::Observation(_) => Role::Observation,
            Segment::SelfEval(_) => Role::SelfEval,
            Segment::Reflection(_) => Role::Reflection,
        }
    }

    /// Policy-generated tokens; observations are produced by the sandbox.
    pub fn token_count(&self) -> u64 {
        match self {
            Segment::Think(t) | Segment::Reflection(t) => u64::from(t.tokens),
            Segment::ToolCall(s) => u64::from(s.tokens),
            Segment::Observation(_) => 0,
            Segment::SelfEval(s) => s.tokens(),
        }
    }
}

/// One `(C, T, O)` triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Round {
    pub think: Think,
    pub tools: ToolStep,
    pub observation: ImageRef,
}

/// The editing trace without its self-evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EditHistory {
    pub rounds: Vec<Round>,
    pub final_think: Think,
}

impl EditHistory {
    pub fn segments(&self) -> Vec<Segment> {
        let mut out = Vec::with_capacity(self.rounds.len() * 3 + 1);
        for r in &self.rounds {
            out.push(Segment::Think(r.think.clone()));
            out.push(Segment::ToolCall(r.tools.clone()));
            out.push(Segment::Observation(r.observation.clone()));
        }
        out.push(Segment::Think(self.final_think.clone()));
        out
    }

    /// Think and tool-call tokens.
    pub fn token_count(&self) -> u64 {
        self.rounds
            .iter()
            .map(|r| u64::from(r.think.tokens) + u64::from(r.tools.tokens))
            .sum::<u64>()
            + u64::from(self.final_think.tokens)
    }

    pub fn tool_calls(&self) -> impl Iterator<Item = &ToolCall> {
        self.rounds.iter().flat_map(|r| r.tools.calls.iter())
    }

    pub fn final_observation(&self) -> Option<&ImageRef> {
        self.rounds.last().map(|r| &r.observation)
    }

    /// Re-executes every round from `source` and checks each stored hash.
    pub fn replay(
        &self,
        source: &ImageBuffer,
        registry: &Registry,
    ) -> Result<ImageBuffer, TrajectoryError> {
        let mut current = source.clone();
        for (i, r) in self.rounds.iter().enumerate() {
            current = execute_lenient(&current, &r.tools.calls, registry);
            if !r.observation.matches(&current) {
                return Err(TrajectoryError::ObservationMismatch {
                    round: i,
                    recorded: r.observation.hash,
                    replayed: current.content_hash(),
                });
            }
        }
        Ok(current)
    }
}

/// A finalized editing trajectory `{(I, Q); ([C, T, O]…, [C_t, S])}`.
#[derive(Debug, Clone, PartialEq)]
pub struct EditTrajectory {
    source: ImageRef,
    query: String,
    history: EditHistory,
    self_eval: SelfEvalSegment,
    max_rounds: u32,
    format_ok: bool,
}

impl EditTrajectory {
    pub fn source(&self) -> &ImageRef {
        &self.source
    }

    pub fn query(&self) -> &str {
        &self.query
    }

    pub fn history(&self) -> &EditHistory {
        &self.history
    }

    pub fn rounds(&self) -> &[Round] {
        &self.history.rounds
    }

    pub fn final_think(&self) -> &Think {
        &self.history.final_think
    }

    pub fn self_eval(&self) -> &SelfEvalSegment {
        &self.self_eval
    }

    pub fn max_rounds(&self) -> u32 {
        self.max_rounds
    }

    /// Whether every generated turn parsed under the tag grammar.
    pub fn format_ok(&self) -> bool {
        self.format_ok
    }

    /// The image the trajectory ends on (the source if no round executed).
    pub fn final_image(&self) -> &ImageRef {
        self.history.final_observation().unwrap_or(&self.source)
    }

    pub fn segments(&self) -> Vec<Segment> {
        let mut s = self.history.segments();
        s.push(Segment::SelfEval(self.self_eval.clone()));
        s
    }

    pub fn total_generated_tokens(&self) -> u64 {
        self.segments().iter().map(Segment::token_count).sum()
    }

    pub fn replay(
        &self,
        source: &ImageBuffer,
        registry: &Registry,
    ) -> Result<ImageBuffer, TrajectoryError> {
        if !self.source.matches(source) {
            return Err(TrajectoryError::SourceMismatch);
        }
        self.history.replay(source, registry)
    }

    /// The evaluator-loop view of this trajectory: same context, with the
    /// self-evaluation as the prediction.
    pub fn to_eval(&self) -> EvalTrajectory {
        EvalTrajectory {
            source: self.source.clone(),
            query: self.query.clone(),
            history: self.history.clone(),
            prediction: self.self_eval.clone(),
            format_ok: self.format_ok,
        }
    }
}

/// `Σ|C_k| + Σ|T_k|`: think and tool-call tokens, excluding the self-evaluation.
pub fn token_count_editor(traj: &EditTrajectory) -> u64 {
    traj.history.token_count()
}

/// Tokens of the self-evaluation output only.
pub fn token_count_evaluator(traj: &EvalTrajectory) -> u64 {
    traj.prediction.tokens()
}

/// Single-owner builder for an editing trajectory in progress.
#[derive(Debug)]
pub struct EditTrajectoryBuilder {
    source: ImageRef,
    query: String,
    max_rounds: u32,
    rounds: Vec<Round>,
    current: ImageBuffer,
    registry: Arc<Registry>,
    format_ok: bool,
}

impl EditTrajectoryBuilder {
    pub fn new(
        source: ImageRef,
        source_image: &ImageBuffer,
        query: impl Into<String>,
        max_rounds: u32,
        registry: Arc<Registry>,
    ) -> Result<Self, TrajectoryError> {
        if !source.matches(source_image) {
            return Err(TrajectoryError::SourceMismatch);
        }
        Ok(Self {
            source,
            query: query.into(),
            max_rounds,
            rounds: Vec::new(),
            current: source_image.clone(),
            registry,
            format_ok: true,
        })
    }

    pub fn rounds(&self) -> usize {
        self.rounds.len()
    }

    pub fn max_rounds(&self) -> u32 {
        self.max_rounds
    }

    pub fn is_full(&self) -> bool {
        self.rounds.len() >= self.max_rounds as usize
    }

    pub fn current_image(&self) -> &ImageBuffer {
        &self.current
    }

    pub fn source(&self) -> &ImageRef {
        &self.source
    }

    pub fn query(&self) -> &str {
        &self.query
    }

    pub fn history_segments(&self) -> Vec<Segment> {
        let mut out = Vec::new();
        for r in &self.rounds {
            out.push(Segment::Think(r.think.clone()));
            out.push(Segment::ToolCall(r.tools.clone()));
            out.push(Segment::Observation(r.observation.clone()));
        }
        out
    }

    /// Records that some generated turn failed the tag grammar.
    pub fn mark_malformed(&mut self) {
        self.format_ok = false;
    }

    /// Executes `tools` on the current image; returns the image the
    /// observation must reference.
    pub fn preview(&self, tools: &ToolStep) -> ImageBuffer {
        execute_lenient(&self.current, &tools.calls, &self.registry)
    }

    /// Appends a `(C, T, O)` round after checking `observation` against the
    /// sandbox replay of `tools`.
    pub fn append_round(
        &mut self,
        think: Think,
        tools: ToolStep,
        observation: ImageRef,
    ) -> Result<&mut Self, TrajectoryError> {
        if self.is_full() {
            return Err(TrajectoryError::RoundLimitExceeded {
                max: self.max_rounds,
            });
        }
        if tools.calls.is_empty() {
            return Err(TrajectoryError::EmptyToolStep);
        }
        let next = self.preview(&tools);
        if !observation.matches(&next) {
            return Err(TrajectoryError::ObservationMismatch {
                round: self.rounds.len(),
                recorded: observation.hash,
                replayed: next.content_hash(),
            });
        }
        self.rounds.push(Round {
            think,
            tools,
            observation,
        });
        self.current = next;
        Ok(self)
    }

    /// Seals the trajectory. At least one round is required unless a turn
    /// was marked malformed.
    pub fn finalize(
        self,
        final_think: Think,
        self_eval: SelfEvalSegment,
    ) -> Result<EditTrajectory, TrajectoryError> {
        if self.rounds.is_empty() && self.format_ok {
            return Err(TrajectoryError::NoRounds);
        }
        Ok(EditTrajectory {
            source: self.source,
            query: self.query,
            history: EditHistory {
                rounds: self.rounds,
                final_think,
            },
            self_eval,
            max_rounds: self.max_rounds,
            format_ok: self.format_ok,
        })
    }
}

/// `{(I, Q, H); (S)}`: an evaluator-loop sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTrajectory {
    source: ImageRef,
    query: String,
    history: EditHistory,
    prediction: SelfEvalSegment,
    format_ok: bool,
}

impl EvalTrajectory {
    pub fn new(
        source: ImageRef,
        query: impl Into<String>,
        history: EditHistory,
        prediction: SelfEvalSegment,
        format_ok: bool,
    ) -> Self {
        Self {
            source,
            query: query.into(),
            history,
            prediction,
            format_ok,
        }
    }

    pub fn source(&self) -> &ImageRef {
        &self.source
    }

    pub fn query(&self) -> &str {
        &self.query
    }

    pub fn history(&self) -> &EditHistory {
        &self.history
    }

    pub fn prediction(&self) -> &SelfEvalSegment {
        &self.prediction
    }

    pub fn format_ok(&self) -> bool {
        self.format_ok
    }
}

/// `{(I, Q); ([H_loser, S_loser], [R, T_winner, O_winner])}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectionTrajectory {
    source: ImageRef,
    query: String,
    loser_history: EditHistory,
    loser_eval: SelfEvalSegment,
    winner_score: f64,
    rationale: Think,
    corrective_tools: Vec<ToolStep>,
    target: ImageRef,
}

impl ReflectionTrajectory {
    /// Checks dominance and that `corrective_tools` replayed from
    /// `source_image` reproduce `target` exactly.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        source: ImageRef,
        source_image: &ImageBuffer,
        query: impl Into<String>,
        loser_history: EditHistory,
        loser_eval: SelfEvalSegment,
        winner_score: f64,
        rationale: Think,
        corrective_tools: Vec<ToolStep>,
        target: ImageRef,
        registry: &Registry,
    ) -> Result<Self, TrajectoryError> {
        if !source.matches(source_image) {
            return Err(TrajectoryError::SourceMismatch);
        }
        if loser_eval.score() >= winner_score {
            return Err(TrajectoryError::NotDominated {
                loser: loser_eval.score(),
                winner: winner_score,
            });
        }
        let replayed = replay_steps(source_image, &corrective_tools, registry);
        if !target.matches(&replayed) {
            return Err(TrajectoryError::ReplayMismatch {
                target: target.hash,
                replayed: replayed.content_hash(),
            });
        }
        Ok(Self {
            source,
            query: query.into(),
            loser_history,
            loser_eval,
            winner_score,
            rationale,
            corrective_tools,
            target,
        })
    }

    pub fn source(&self) -> &ImageRef {
        &self.source
    }

    pub fn query(&self) -> &str {
        &self.query
    }

    pub fn loser_history(&self) -> &EditHistory {
        &self.loser_history
    }

    pub fn loser_eval(&self) -> &SelfEvalSegment {
        &self.loser_eval
    }

    pub fn winner_score(&self) -> f64 {
        self.winner_score
    }

    pub fn rationale(&self) -> &Think {
        &self.rationale
    }

    pub fn corrective_tools(&self) -> &[ToolStep] {
        &self.corrective_tools
    }

    pub fn target(&self) -> &ImageRef {
        &self.target
    }

    pub fn replay_target(&self, source_image: &ImageBuffer, registry: &Registry) -> bool {
        self.target.matches(&replay_steps(
            source_image,
            &self.corrective_tools,
            registry,
        ))
    }
}

pub(crate) fn replay_steps(
    source: &ImageBuffer,
    steps: &[ToolStep],
    registry: &Registry,
) -> ImageBuffer {
    steps.iter().fold(source.clone(), |acc, s| {
        execute_lenient(&acc, &s.calls, registry)
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::toolbox::{ImageStore, MemoryStore};

    pub(crate) fn sample_source() -> ImageBuffer {
        ImageBuffer::from_fn(6, 4, |x, y| {
            [0.1 + 0.1 * f64::from(x), 0.2 + 0.1 * f64::from(y), 0.4]
        })
        .quantized()
    }

    pub(crate) fn build(
        store: &MemoryStore,
        think_tokens: &[u32],
        tool_tokens: &[u32],
        final_tokens: u32,
        eval: SelfEvalSegment,
    ) -> EditTrajectory {
        let reg = Arc::new(Registry::builtin());
        let src = sample_source();
        let src_ref = store.put(&src).unwrap();
        let mut b = EditTrajectoryBuilder::new(src_ref, &src, "brighten", 4, reg).unwrap();
        for (i, (&c, &t)) in think_tokens.iter().zip(tool_tokens).enumerate() {
            let tools = ToolStep::new(
                vec![ToolCall::new("exposure").with("ev", 0.25 * (i + 1) as f64)],
                t,
            );
            let obs = store.put(&b.preview(&tools)).unwrap();
            b.append_round(Think::new(format!("step {i}"), c), tools, obs)
                .unwrap();
        }
        b.finalize(Think::new("done", final_tokens), eval).unwrap()
    }

    fn eval_seg(score: f64, r: u32, a: u32) -> SelfEvalSegment {
        SelfEvalSegment::new(SelfEvaluation::new("looks right", score).unwrap(), r, a)
    }

    #[test]
    fn editor_token_count_examples() {
        let store = MemoryStore::new();
        let t = build(&store, &[10, 8], &[5, 4], 6, eval_seg(4.0, 0, 12));
        assert_eq!(token_count_editor(&t), 33);
        assert_eq!(t.total_generated_tokens(), 45);
        let t = build(&store, &[7], &[3], 2, eval_seg(4.0, 0, 9));
        assert_eq!(token_count_editor(&t), 12);
        let t = build(&store, &[0], &[0], 0, eval_seg(4.0, 0, 0));
        assert_eq!(token_count_editor(&t), 0);
    }

    #[test]
    fn evaluator_token_count_examples() {
        let store = MemoryStore::new();
        let t = build(&store, &[60], &[30], 10, eval_seg(3.0, 11, 4));
        let e = t.to_eval();
        assert_eq!(e.history().token_count(), 100);
        assert_eq!(token_count_evaluator(&e), 15);
        let e = EvalTrajectory::new(
            t.source().clone(),
            "q",
            t.history().clone(),
            eval_seg(3.0, 0, 0),
            true,
        );
        assert_eq!(token_count_evaluator(&e), 0);
        assert!(e
            .history()
            .segments()
            .iter()
            .all(|s| s.role() != Role::SelfEval));
    }

    #[test]
    fn round_limit() {
        let store = MemoryStore::new();
        let reg = Arc::new(Registry::builtin());
        let src = sample_source();
        let mut b =
            EditTrajectoryBuilder::new(store.put(&src).unwrap(), &src, "q", 4, reg).unwrap();
        assert_eq!(b.rounds(), 0);
        for _ in 0..4 {
            let tools = ToolStep::new(vec![ToolCall::new("contrast").with("c", 5.0)], 1);
            let obs = store.put(&b.preview(&tools)).unwrap();
            b.append_round(Think::new("", 1), tools, obs).unwrap();
        }
        assert_eq!(b.rounds(), 4);
        let tools = ToolStep::new(vec![ToolCall::new("contrast").with("c", 5.0)], 1);
        let obs = store.put(&b.preview(&tools)).unwrap();
        assert_eq!(
            b.append_round(Think::new("", 1), tools, obs).unwrap_err(),
            TrajectoryError::RoundLimitExceeded { max: 4 }
        );
    }

    #[test]
    fn observation_mismatch() {
        let store = MemoryStore::new();
        let reg = Arc::new(Registry::builtin());
        let src = sample_source();
        let src_ref = store.put(&src).unwrap();
        let mut b = EditTrajectoryBuilder::new(src_ref.clone(), &src, "q", 4, reg).unwrap();
        let tools = ToolStep::new(vec![ToolCall::new("exposure").with("ev", 1.0)], 1);
        let err = b
            .append_round(Think::new("", 1), tools, src_ref)
            .unwrap_err();
        assert!(matches!(
            err,
            TrajectoryError::ObservationMismatch { round: 0, .. }
        ));
        assert_eq!(b.rounds(), 0);
    }

    #[test]
    fn replay_reproduces_observations() {
        let store = MemoryStore::new();
        let t = build(&store, &[1, 1, 1], &[1, 1, 1], 1, eval_seg(2.5, 1, 1));
        let reg = Registry::builtin();
        let last = t.replay(&sample_source(), &reg).unwrap();
        assert!(t.final_image().matches(&last));
    }

    #[test]
    fn self_eval_invariants() {
        assert!(SelfEvaluation::new("ok", 5.5).is_err());
        assert!(SelfEvaluation::new("  ", 3.0).is_err());
        assert!(SelfEvaluation::new("ok", 1.0).is_ok());
    }

    #[test]
    fn finalize_requires_a_round() {
        let store = MemoryStore::new();
        let src = sample_source();
        let b = EditTrajectoryBuilder::new(
            store.put(&src).unwrap(),
            &src,
            "q",
            4,
            Arc::new(Registry::builtin()),
        )
        .unwrap();
        assert_eq!(
            b.finalize(Think::new("", 0), eval_seg(3.0, 0, 1))
                .unwrap_err(),
            TrajectoryError::NoRounds
        );
    }
}
