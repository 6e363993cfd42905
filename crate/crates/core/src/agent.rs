//! The iMCoT loop: generate, parse, validate, apply, observe, repeat, then
//! self-evaluate.
//!
//! A turn is at most one round. Turns that contain tool calls append a
//! round; a turn with an answer finalizes. The loop allows `max_rounds + 2`
//! turns, so a policy that never answers still terminates; such a rollout
//! is finalized with a fallback self-evaluation and marked malformed.

use std::sync::Arc;

use crate::policy::{Backend, GenerationContext, GenerationMode, PolicyError, RawModelOutput};
use crate::toolbox::{ImageBuffer, ImageRef, ImageStore, Registry, ToolError};
use crate::trajectory::{
    EditHistory, EditTrajectory, EditTrajectoryBuilder, EvalTrajectory, SelfEvalSegment,
    SelfEvaluation, Think, ToolStep, TrajectoryError,
};

pub const FALLBACK_RATIONALE: &str = "no self-evaluation produced";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AgentError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Tool(#[from] ToolError),
}

/// The sandbox shared by all rollouts: tool registry plus image store.
#[derive(Clone)]
pub struct Sandbox {
    pub registry: Arc<Registry>,
    pub store: Arc<dyn ImageStore>,
}

impl Sandbox {
    pub fn new(registry: Arc<Registry>, store: Arc<dyn ImageStore>) -> Self {
        Self { registry, store }
    }
}

/// One generated turn and whether it parsed cleanly.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnRecord {
    pub mode: GenerationMode,
    pub output: RawModelOutput,
    pub format_ok: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub trajectory: EditTrajectory,
    pub turns: Vec<TurnRecord>,
}

#[derive(Debug, Clone, Copy)]
pub struct EpisodeSpec<'a> {
    pub source: &'a ImageRef,
    pub source_image: &'a ImageBuffer,
    pub query: &'a str,
    pub max_rounds: u32,
    pub member: usize,
    pub seed: u64,
}

fn fallback_eval() -> SelfEvalSegment {
    SelfEvalSegment::new(
        SelfEvaluation::new(FALLBACK_RATIONALE, 1.0).expect("fallback is in range"),
        0,
        0,
    )
}

/// Picks the rationale for an answer: the answer text, else the think text,
/// else a fixed placeholder.
fn rationale(answer: &str, think: Option<&str>) -> String {
    if !answer.is_empty() {
        answer.to_string()
    } else if let Some(t) = think.filter(|t| !t.is_empty()) {
        t.to_string()
    } else {
        "score only".to_string()
    }
}

/// Runs one editor rollout to completion.
pub fn run_episode(
    backend: &dyn Backend,
    sandbox: &Sandbox,
    spec: EpisodeSpec<'_>,
) -> Result<Episode, AgentError> {
    let mut builder = EditTrajectoryBuilder::new(
        spec.source.clone(),
        spec.source_image,
        spec.query,
        spec.max_rounds,
        sandbox.registry.clone(),
    )?;
    let mut turns = Vec::new();
    let budget = spec.max_rounds + 2;
    for turn in 0..budget {
        let mode = if builder.is_full() {
            GenerationMode::FinalSelfEval
        } else {
            GenerationMode::EditStep
        };
        let ctx = GenerationContext {
            source: spec.source.clone(),
            query: spec.query.to_string(),
            history: builder.history_segments(),
            mode,
            member: spec.member,
            turn,
            seed: spec.seed,
        };
        let output = backend.generate(&ctx)?;
        let parsed = output.parse();
        let mut ok = parsed.format_ok;
        let think = parsed.think();
        let (calls, call_tokens) = parsed.calls();
        let mut acted = false;
        if !calls.is_empty() {
            if mode == GenerationMode::FinalSelfEval {
                ok = false;
            } else {
                let think_seg = think.map_or_else(|| Think::new("", 0), |(t, n)| Think::new(t, n));
                let tools = ToolStep::new(calls, call_tokens);
                let obs = sandbox.store.put(&builder.preview(&tools))?;
                builder.append_round(think_seg, tools, obs)?;
                acted = true;
            }
        }
        let answer = parsed.answer();
        let done = match answer {
            Some((text, score, tokens)) if builder.rounds() > 0 => {
                let final_think = match think {
                    Some((t, n)) if !acted => Think::new(t, n),
                    _ => Think::new("", 0),
                };
                let eval = SelfEvaluation::new(rationale(text, think.map(|t| t.0)), score)?;
                Some((final_think, SelfEvalSegment::new(eval, 0, tokens)))
            }
            Some(_) => {
                // an answer before any edit has nothing to evaluate
                ok = false;
                None
            }
            None => {
                if !acted {
                    ok = false;
                }
                None
            }
        };
        if !ok {
            builder.mark_malformed();
        }
        turns.push(TurnRecord {
            mode,
            output,
            format_ok: ok,
        });
        if let Some((final_think, eval)) = done {
            let trajectory = builder.finalize(final_think, eval)?;
            return Ok(Episode { trajectory, turns });
        }
    }
    builder.mark_malformed();
    let trajectory = builder.finalize(Think::new("", 0), fallback_eval())?;
    Ok(Episode { trajectory, turns })
}

/// Runs one evaluator-only turn over a complete history.
pub fn run_evaluation(
    backend: &dyn Backend,
    source: &ImageRef,
    query: &str,
    history: &EditHistory,
    member: usize,
    seed: u64,
) -> Result<(EvalTrajectory, TurnRecord), AgentError> {
    let ctx = GenerationContext::evaluator(source.clone(), query, history, member, seed);
    let output = backend.generate(&ctx)?;
    let parsed = output.parse();
    let calls = parsed.calls().0;
    let (ok, prediction) = match parsed.answer() {
        Some((text, score, tokens)) if calls.is_empty() => {
            let think = parsed.think();
            let eval = SelfEvaluation::new(rationale(text, think.map(|t| t.0)), score)?;
            (
                parsed.format_ok,
                SelfEvalSegment::new(eval, think.map_or(0, |t| t.1), tokens),
            )
        }
        _ => (false, fallback_eval()),
    };
    let traj = EvalTrajectory::new(source.clone(), query, history.clone(), prediction, ok);
    Ok((
        traj,
        TurnRecord {
            mode: GenerationMode::EvaluatorOnly,
            output,
            format_ok: ok,
        },
    ))
}
