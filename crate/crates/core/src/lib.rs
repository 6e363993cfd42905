//! Desk-scale workbench for dual-loop (editor/evaluator) policy optimization
//! of an interleaved reasoning/tool-calling image editing agent.
//!
//! The crate is organised bottom-up:
//!
//! - [`toolbox`]: deterministic parametric image-tool sandbox, PNG IO and
//!   content-addressed image references.
//! - [`trajectory`]: editing, evaluation and reflection trajectories with
//!   token accounting and a JSONL record format.
//! - [`policy`]: generation backends (scripted, toy differentiable, remote)
//!   and the tag grammar used to parse model output.
//! - [`rewards`]: format, tool-accuracy, pairwise-preference and
//!   score-alignment rewards.
//! - [`sepo`]: group advantages, loss masks, the surrogate objective,
//!   rollouts and the interleaved training scheduler.
//! - [`reflection`]: winner/loser pair detection and SFT export.
//! - [`metrics`]: pixel metrics, rank/linear correlation, judge scores,
//!   preference rates and the benchmark runner.
//! - [`datagen`]: the staged data-generation pipeline.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise.

pub mod agent;
pub mod datagen;
pub mod metrics;
pub mod par;
pub mod plot;
pub mod policy;
pub mod reflection;
pub mod rewards;
pub mod sepo;
pub mod toolbox;
pub mod trajectory;
pub mod wire;

pub use toolbox::{ImageBuffer, ImageRef, Registry, ToolCall};
pub use trajectory::{EditTrajectory, EvalTrajectory, ReflectionTrajectory, SelfEvaluation};
