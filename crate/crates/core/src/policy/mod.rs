//! Policy backends: anything that turns a [`GenerationContext`] into tagged text.

mod grammar;
mod remote;
mod scripted;
pub mod toy;

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::toolbox::ImageRef;
use crate::trajectory::{EditHistory, Segment};
use crate::wire::WireError;

pub use grammar::{parse_output, render_output, split_answer, ParsedOutput, ParsedSegment};
pub use remote::{RemoteBackend, AGENT_PROMPT};
pub use scripted::{Script, ScriptedBackend};
pub use toy::{ToyAction, ToyBackend, ToyPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationMode {
    /// Continue the edit: think, then tool calls or a final answer.
    EditStep,
    /// The round budget is spent; only a final think and answer are accepted.
    FinalSelfEval,
    /// Score a complete history produced elsewhere.
    EvaluatorOnly,
}

/// Everything a backend sees for one turn.
#[derive(Debug, Clone)]
pub struct GenerationContext {
    pub source: ImageRef,
    pub query: String,
    pub history: Vec<Segment>,
    pub mode: GenerationMode,
    /// Index of this rollout within its group.
    pub member: usize,
    /// Turn index within the rollout.
    pub turn: u32,
    pub seed: u64,
}

impl GenerationContext {
    pub fn evaluator(
        source: ImageRef,
        query: impl Into<String>,
        history: &EditHistory,
        member: usize,
        seed: u64,
    ) -> Self {
        Self {
            source,
            query: query.into(),
            history: history.segments(),
            mode: GenerationMode::EvaluatorOnly,
            member,
            turn: 0,
            seed,
        }
    }

    /// Evaluator contexts must carry a complete history: rounds followed by
    /// a final think, with no self-evaluation.
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self
            .history
            .iter()
            .any(|s| matches!(s, Segment::SelfEval(_)))
        {
            return Err(PolicyError::InvalidContext(
                "history already holds a self-evaluation".into(),
            ));
        }
        if self.mode == GenerationMode::EvaluatorOnly
            && !matches!(self.history.last(), Some(Segment::Think(_)))
        {
            return Err(PolicyError::InvalidContext(
                "evaluator history must end with the final think".into(),
            ));
        }
        Ok(())
    }

    /// Stream seed for this `(seed, member, turn)` triple.
    pub fn stream_seed(&self) -> u64 {
        mix(mix(self.seed, self.member as u64), u64::from(self.turn))
    }
}

/// Combines two words and applies the SplitMix64 finaliser. Used to derive
/// independent RNG streams.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(a << 6)
        .wrapping_add(a >> 2);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Raw text of one turn plus optional per-region token counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawModelOutput {
    pub text: String,
    #[serde(default, rename = "tokens", skip_serializing_if = "Option::is_none")]
    pub segment_tokens: Option<Vec<u32>>,
}

impl RawModelOutput {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            segment_tokens: None,
        }
    }

    pub fn with_tokens(text: impl Into<String>, tokens: Vec<u32>) -> Self {
        Self {
            text: text.into(),
            segment_tokens: Some(tokens),
        }
    }

    pub fn parse(&self) -> ParsedOutput {
        parse_output(&self.text, self.segment_tokens.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("backend timed out after {0:?}")]
    Timeout(Duration),
    #[error("invalid generation context: {0}")]
    InvalidContext(String),
    #[error("script has no output for rollout {member}, turn {turn}")]
    ScriptExhausted { member: usize, turn: u32 },
    #[error("trajectory is outside the toy action space: {0}")]
    UnknownAction(String),
}

impl From<WireError> for PolicyError {
    fn from(e: WireError) -> Self {
        match e {
            WireError::Timeout(d) => PolicyError::Timeout(d),
            other => PolicyError::BackendUnavailable(other.to_string()),
        }
    }
}

pub trait Backend: Send + Sync {
    fn generate(&self, ctx: &GenerationContext) -> Result<RawModelOutput, PolicyError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn generate(&self, ctx: &GenerationContext) -> Result<RawModelOutput, PolicyError> {
        (**self).generate(ctx)
    }
}
