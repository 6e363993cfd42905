//! Reward components for both loops.
//!
//! Editor: `R_edit = R_f + R_ta + R_pp ∈ [0, 3]`.
//! Evaluator: `R_eval = R_f + R_sa ∈ [0, 2 + ε]`.

use serde::{Deserialize, Serialize};

use crate::policy::RawModelOutput;
use crate::toolbox::Registry;
use crate::trajectory::{EditTrajectory, EvalTrajectory, SelfEvaluation, MAX_SCORE, MIN_SCORE};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RewardError {
    #[error("group of {0} is too small; at least 2 members are required")]
    GroupTooSmall(usize),
    #[error("score {0} is outside [1, 5]")]
    ScoreOutOfRange(f64),
    #[error("sigma and epsilon must be positive")]
    InvalidConfig,
    #[error("member index {index} is outside a group of {len}")]
    MemberOutOfRange { index: usize, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreAlignConfig {
    pub sigma: f64,
    pub epsilon: f64,
}

impl Default for ScoreAlignConfig {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            epsilon: 1e-4,
        }
    }
}

impl ScoreAlignConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if self.sigma > 0.0
            && self.epsilon > 0.0
            && self.sigma.is_finite()
            && self.epsilon.is_finite()
        {
            Ok(())
        } else {
            Err(RewardError::InvalidConfig)
        }
    }
}

/// Per-trajectory reward components. Absent components do not apply to
/// the loop that produced the record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tool_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairwise_preference: Option<f64>,
    /// Ablation replacement for the pairwise term: `(s - 1) / 4`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub absolute_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score_alignment: Option<f64>,
    pub total: f64,
}

impl RewardBreakdown {
    fn sum(mut self) -> Self {
        self.total = self.format
            + self.tool_accuracy.unwrap_or(0.0)
            + self.pairwise_preference.unwrap_or(0.0)
            + self.absolute_score.unwrap_or(0.0)
            + self.score_alignment.unwrap_or(0.0);
        self
    }

    fn empty(format: f64) -> Self {
        Self {
            format,
            tool_accuracy: None,
            pairwise_preference: None,
            absolute_score: None,
            score_alignment: None,
            total: 0.0,
        }
    }
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// `1` iff one generated turn satisfies the tag grammar.
pub fn format_reward(raw: &RawModelOutput) -> f64 {
    indicator(raw.parse().format_ok)
}

/// `1` iff every turn in `turns` is well-formed (all-or-nothing).
pub fn format_reward_turns<'a>(turns: impl IntoIterator<Item = &'a RawModelOutput>) -> f64 {
    indicator(turns.into_iter().all(|t| t.parse().format_ok))
}

pub fn tool_accuracy_reward(traj: &EditTrajectory, registry: &Registry) -> f64 {
    let mut n = 0usize;
    let mut acc = 0.0;
    for call in traj.history().tool_calls() {
        let r = registry.validate(call);
        acc += 0.5 * indicator(r.name_ok) + 0.5 * r.params_ok_fraction;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

/// Strict win rate of each member against its siblings.
pub fn pairwise_preference_rewards(scores: &[f64]) -> Result<Vec<f64>, RewardError> {
    let g = scores.len();
    if g < 2 {
        return Err(RewardError::GroupTooSmall(g));
    }
    let denom = (g - 1) as f64;
    Ok(scores
        .iter()
        .map(|si| scores.iter().filter(|sj| si > sj).count() as f64 / denom)
        .collect())
}

fn check_score(s: f64) -> Result<f64, RewardError> {
    if (MIN_SCORE..=MAX_SCORE).contains(&s) {
        Ok(s)
    } else {
        Err(RewardError::ScoreOutOfRange(s))
    }
}

/// `(s - 1) / 4` on a self-score in `[1, 5]`.
pub fn absolute_score_reward(score: f64) -> Result<f64, RewardError> {
    Ok((check_score(score)? - MIN_SCORE) / (MAX_SCORE - MIN_SCORE))
}

/// Gaussian kernel on the score gap, floored at `ε`.
pub fn score_alignment_reward(
    pred: f64,
    target: f64,
    cfg: &ScoreAlignConfig,
) -> Result<f64, RewardError> {
    cfg.validate()?;
    let d = (check_score(pred)? - check_score(target)?).abs() / cfg.sigma;
    Ok((-0.5 * d * d).exp() + cfg.epsilon)
}

/// Editor reward for member `index`; `group_scores[index]` must be its own
/// self-evaluation score.
pub fn editor_reward(
    traj: &EditTrajectory,
    index: usize,
    group_scores: &[f64],
    registry: &Registry,
) -> Result<RewardBreakdown, RewardError> {
    if index >= group_scores.len() {
        return Err(RewardError::MemberOutOfRange {
            index,
            len: group_scores.len(),
        });
    }
    let pp = pairwise_preference_rewards(group_scores)?[index];
    let mut r = RewardBreakdown::empty(indicator(traj.format_ok()));
    r.tool_accuracy = Some(tool_accuracy_reward(traj, registry));
    r.pairwise_preference = Some(pp);
    Ok(r.sum())
}

/// Editor reward with the pairwise term replaced by the absolute self-score.
pub fn editor_reward_absolute(
    traj: &EditTrajectory,
    registry: &Registry,
) -> Result<RewardBreakdown, RewardError> {
    let mut r = RewardBreakdown::empty(indicator(traj.format_ok()));
    r.tool_accuracy = Some(tool_accuracy_reward(traj, registry));
    r.absolute_score = Some(absolute_score_reward(traj.self_eval().score())?);
    Ok(r.sum())
}

pub fn evaluator_reward(
    traj: &EvalTrajectory,
    target: &SelfEvaluation,
    cfg: &ScoreAlignConfig,
) -> Result<RewardBreakdown, RewardError> {
    let mut r = RewardBreakdown::empty(indicator(traj.format_ok()));
    r.score_alignment = Some(score_alignment_reward(
        traj.prediction().score(),
        target.score(),
        cfg,
    )?);
    Ok(r.sum())
}

/// Adds an alignment term against an external judge's score to an editor
/// breakdown (the static-judge ablation).
pub fn with_external_alignment(
    mut r: RewardBreakdown,
    self_score: f64,
    judge_score: f64,
    cfg: &ScoreAlignConfig,
) -> Result<RewardBreakdown, RewardError> {
    r.score_alignment = Some(score_alignment_reward(self_score, judge_score, cfg)?);
    Ok(r.sum())
}
