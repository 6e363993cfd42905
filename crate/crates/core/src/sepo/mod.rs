//! Dual-loop policy optimization: group advantages, selective loss masks,
//! the surrogate objective, rollouts and the training scheduler.

mod rollout;
pub mod toy_env;
mod train;

use serde::{Deserialize, Serialize};

use crate::agent::AgentError;
use crate::policy::{PolicyError, ToyPolicy};
use crate::rewards::{RewardBreakdown, RewardError};
use crate::toolbox::ImageRef;
use crate::trajectory::{EditTrajectory, EvalTrajectory, Role, Segment};

pub use rollout::{rollout_group, EditInput};
pub use toy_env::{ToyEnvConfig, ToyEnvironment};
pub use train::{
    hacking_gap, train, GroupRecord, Interleave, JudgeRecord, MemberRecord, RewardMode, StepRecord,
    TrainConfig, TrainOutput,
};

/// Reward variance below this is treated as zero.
pub const MIN_STD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SepoError {
    #[error("group of {0} is too small; at least 2 members are required")]
    GroupTooSmall(usize),
    #[error("no groups to optimise")]
    EmptyBatch,
    #[error("mask has {mask} entries but the trajectory has {tokens} tokens")]
    MaskMismatch { mask: usize, tokens: usize },
    #[error("step {0} has no oracle score")]
    MissingOracle(usize),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopKind {
    Editor,
    Evaluator,
}

/// `A_i = (r_i − mean) / std` with the population standard deviation; all
/// zero when the rewards do not vary.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>, SepoError> {
    let g = rewards.len();
    if g < 2 {
        return Err(SepoError::GroupTooSmall(g));
    }
    let n = g as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < MIN_STD {
        return Ok(vec![0.0; g]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Binary per-token weights aligned with a trajectory's token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossMask {
    weights: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskWarning {
    /// No token is trained.
    EmptyMask,
}

impl LossMask {
    pub fn from_weights(weights: Vec<bool>) -> Self {
        Self { weights }
    }

    pub fn weights(&self) -> &[bool] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn ones(&self) -> usize {
        self.weights.iter().filter(|w| **w).count()
    }
}

/// The token sequence a loss mask is aligned with.
pub trait Tokenized {
    fn token_segments(&self) -> Vec<Segment>;
}

impl Tokenized for EditTrajectory {
    fn token_segments(&self) -> Vec<Segment> {
        self.segments()
    }
}

impl Tokenized for EvalTrajectory {
    fn token_segments(&self) -> Vec<Segment> {
        let mut s = self.history().segments();
        s.push(Segment::SelfEval(self.prediction().clone()));
        s
    }
}

/// Which token roles a loop trains on.
fn trained(role: Role, kind: LoopKind, slm: bool) -> bool {
    match kind {
        LoopKind::Editor => match role {
            Role::SelfEval => !slm,
            Role::Think | Role::ToolCall => true,
            Role::Observation | Role::Reflection => false,
        },
        LoopKind::Evaluator => role == Role::SelfEval,
    }
}

/// Mask with selective loss masking enabled.
pub fn build_loss_mask(traj: &impl Tokenized, kind: LoopKind) -> (LossMask, Option<MaskWarning>) {
    build_loss_mask_with(traj, kind, true)
}

/// `slm = false` trains the editor loop on self-evaluation tokens too.
pub fn build_loss_mask_with(
    traj: &impl Tokenized,
    kind: LoopKind,
    slm: bool,
) -> (LossMask, Option<MaskWarning>) {
    mask_segments(&traj.token_segments(), kind, slm)
}

pub fn mask_segments(
    segments: &[Segment],
    kind: LoopKind,
    slm: bool,
) -> (LossMask, Option<MaskWarning>) {
    let mut weights = Vec::new();
    for seg in segments {
        let w = trained(seg.role(), kind, slm);
        weights.extend(std::iter::repeat_n(w, seg.token_count() as usize));
    }
    let mask = LossMask { weights };
    let warning = (mask.ones() == 0).then_some(MaskWarning::EmptyMask);
    (mask, warning)
}

/// A trajectory as it enters the optimiser.
#[derive(Debug, Clone, PartialEq)]
pub enum MemberTrajectory {
    Edit(EditTrajectory),
    Eval(EvalTrajectory),
}

impl MemberTrajectory {
    pub fn self_score(&self) -> f64 {
        match self {
            MemberTrajectory::Edit(t) => t.self_eval().score(),
            MemberTrajectory::Eval(t) => t.prediction().score(),
        }
    }

    pub fn format_ok(&self) -> bool {
        match self {
            MemberTrajectory::Edit(t) => t.format_ok(),
            MemberTrajectory::Eval(t) => t.format_ok(),
        }
    }

    pub fn as_edit(&self) -> Option<&EditTrajectory> {
        match self {
            MemberTrajectory::Edit(t) => Some(t),
            MemberTrajectory::Eval(_) => None,
        }
    }
}

impl Tokenized for MemberTrajectory {
    fn token_segments(&self) -> Vec<Segment> {
        match self {
            MemberTrajectory::Edit(t) => t.token_segments(),
            MemberTrajectory::Eval(t) => t.token_segments(),
        }
    }
}

/// One weighted term of the objective: `advantage` broadcast over `mask`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub mask: LossMask,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub trajectory: MemberTrajectory,
    pub reward: RewardBreakdown,
    pub advantage: f64,
    /// Usually one term; the external-judge ablation adds a second on the
    /// self-evaluation tokens.
    pub terms: Vec<LossTerm>,
    pub oracle_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub source: ImageRef,
    pub query: String,
    pub loop_kind: LoopKind,
    pub members: Vec<Member>,
    /// Every member failed the format check.
    pub degenerate: bool,
}

impl RolloutGroup {
    pub fn rewards(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.reward.total).collect()
    }

    pub fn advantages(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.advantage).collect()
    }

    pub fn self_scores(&self) -> Vec<f64> {
        self.members
            .iter()
            .map(|m| m.trajectory.self_score())
            .collect()
    }
}

/// Value and analytic gradient of the surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Number of unmasked tokens the loss is normalised by.
    pub tokens: usize,
}

/// `−(1/N) Σ_i Σ_j m_ij A_i log π(t_ij)` over all terms of all members,
/// with `N = Σ m_ij`. Plain policy gradient: no ratio, clipping or KL term.
pub fn grpo_surrogate(groups: &[RolloutGroup], policy: &ToyPolicy) -> Result<Surrogate, SepoError> {
    if groups.is_empty() {
        return Err(SepoError::EmptyBatch);
    }
    let mut weighted = Vec::new();
    let mut n = 0usize;
    for m in groups.iter().flat_map(|g| &g.members) {
        let tokens = policy.tokens(&m.trajectory.token_segments())?;
        for term in &m.terms {
            if term.mask.len() != tokens.len() {
                return Err(SepoError::MaskMismatch {
                    mask: term.mask.len(),
                    tokens: tokens.len(),
                });
            }
            for (w, (_, action)) in term.mask.weights().iter().zip(&tokens) {
                if *w {
                    n += 1;
                    weighted.push((*action, term.advantage));
                }
            }
        }
    }
    let mut grad = vec![0.0; policy.theta.len()];
    if n == 0 {
        return Ok(Surrogate {
            loss: 0.0,
            grad,
            tokens: 0,
        });
    }
    let scale = -1.0 / n as f64;
    let mut loss = 0.0;
    for (action, adv) in weighted {
        if adv != 0.0 {
            loss += scale * adv * policy.logprob(action);
            policy.accumulate_grad(action, scale * adv, &mut grad);
        }
    }
    Ok(Surrogate {
        loss,
        grad,
        tokens: n,
    })
}
