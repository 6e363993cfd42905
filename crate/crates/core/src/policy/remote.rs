use std::sync::Arc;

use super::{
    render_output, Backend, GenerationContext, GenerationMode, ParsedSegment, PolicyError,
    RawModelOutput,
};
use crate::toolbox::ImageStore;
use crate::trajectory::Segment;
use crate::wire::{ChatRequest, Message, Part, Speaker, WireClient};

const EDIT_INSTRUCTION: &str =
    "Continue: reason inside <think>, then either emit <tool_call> records \
or finish with <answer> containing a score from 1 to 5.";
const FINAL_INSTRUCTION: &str =
    "The round budget is spent. Reason inside <think>, then give <answer> \
with a score from 1 to 5.";
const EVAL_INSTRUCTION: &str =
    "Judge how well the edit above satisfies the request. Reason inside \
<think>, then give <answer> with a score from 1 to 5.";

/// Default system prompt describing the tag grammar to a remote model.
pub const AGENT_PROMPT: &str = include_str!("../../assets/prompts/agent.txt");

/// Backend that forwards each turn to an HTTP model endpoint.
pub struct RemoteBackend {
    client: WireClient,
    store: Arc<dyn ImageStore>,
    system_prompt: String,
    max_tokens: Option<u32>,
}

impl RemoteBackend {
    pub fn new(
        client: WireClient,
        store: Arc<dyn ImageStore>,
        system_prompt: impl Into<String>,
    ) -> Self {
        Self {
            client,
            store,
            system_prompt: system_prompt.into(),
            max_tokens: None,
        }
    }

    pub fn with_max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = Some(n);
        self
    }

    /// Builds the chat transcript for `ctx`; images are resolved through the store.
    pub fn request(&self, ctx: &GenerationContext) -> Result<ChatRequest, PolicyError> {
        let image = |r| {
            self.store
                .get(r)
                .map(|img| Part::image(&img))
                .map_err(|e| PolicyError::InvalidContext(e.to_string()))
        };
        let mut messages = vec![
            Message::new(
                Speaker::System,
                vec![Part::text(self.system_prompt.clone())],
            ),
            Message::new(
                Speaker::User,
                vec![image(&ctx.source)?, Part::text(ctx.query.clone())],
            ),
        ];
        let mut pending = Vec::new();
        let flush = |pending: &mut Vec<ParsedSegment>, messages: &mut Vec<Message>| {
            if !pending.is_empty() {
                messages.push(Message::new(
                    Speaker::Assistant,
                    vec![Part::text(render_output(pending))],
                ));
                pending.clear();
            }
        };
        for seg in &ctx.history {
            match seg {
                Segment::Think(t) | Segment::Reflection(t) => pending.push(ParsedSegment::Think {
                    text: t.text.clone(),
                    tokens: t.tokens,
                }),
                Segment::ToolCall(step) => {
                    pending.extend(step.calls.iter().map(|c| ParsedSegment::ToolCall {
                        call: c.clone(),
                        tokens: 0,
                    }))
                }
                Segment::Observation(r) => {
                    flush(&mut pending, &mut messages);
                    messages.push(Message::new(Speaker::User, vec![image(r)?]));
                }
                Segment::SelfEval(s) => pending.push(ParsedSegment::Answer {
                    rationale: s.eval.rationale().to_string(),
                    score: Some(s.score()),
                    tokens: 0,
                }),
            }
        }
        flush(&mut pending, &mut messages);
        let instruction = match ctx.mode {
            GenerationMode::EditStep => EDIT_INSTRUCTION,
            GenerationMode::FinalSelfEval => FINAL_INSTRUCTION,
            GenerationMode::EvaluatorOnly => EVAL_INSTRUCTION,
        };
        messages.push(Message::new(Speaker::User, vec![Part::text(instruction)]));
        Ok(ChatRequest {
            messages,
            max_tokens: self.max_tokens,
        })
    }
}

impl Backend for RemoteBackend {
    fn generate(&self, ctx: &GenerationContext) -> Result<RawModelOutput, PolicyError> {
        ctx.validate()?;
        let resp = self.client.send(&self.request(ctx)?)?;
        Ok(RawModelOutput {
            text: resp.text,
            segment_tokens: resp.usage.segment_tokens,
        })
    }
}
