use serde::{Deserialize, Serialize};

use super::toy_env::ToyEnvironment;
use super::{
    build_loss_mask_with, group_advantages, grpo_surrogate, rollout_group, LoopKind, LossTerm,
    Member, MemberTrajectory, RolloutGroup, SepoError,
};
use crate::agent::{run_evaluation, AgentError};
use crate::par;
use crate::policy::{mix, ToyBackend, ToyPolicy};
use crate::reflection::{detect_pairs, CandidateGroup};
use crate::rewards::{
    editor_reward, editor_reward_absolute, evaluator_reward, score_alignment_reward,
    RewardBreakdown, ScoreAlignConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Win rate of the self-score within the group.
    Pairwise,
    /// The normalised self-score itself.
    Absolute,
    /// Pairwise editor reward; self-scores are supervised by a static judge
    /// on the editor's own outputs instead of by the evaluator loop.
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interleave {
    pub editor: u32,
    pub evaluator: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub group_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    /// Groups per step; each group is one input.
    pub batch_groups: usize,
    pub interleave: Interleave,
    pub seed: u64,
    pub max_rounds: u32,
    pub sigma: f64,
    pub epsilon: f64,
    pub slm: bool,
    pub evaluator_loop: bool,
    pub reward_mode: RewardMode,
    /// Keep editor groups with a score spread for reflection export.
    pub keep_candidates: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let align = ScoreAlignConfig::default();
        Self {
            group_size: 4,
            learning_rate: 0.5,
            steps: 500,
            batch_groups: 4,
            interleave: Interleave {
                editor: 1,
                evaluator: 1,
            },
            seed: 0,
            max_rounds: 1,
            sigma: align.sigma,
            epsilon: align.epsilon,
            slm: true,
            evaluator_loop: true,
            reward_mode: RewardMode::Pairwise,
            keep_candidates: true,
        }
    }
}

impl TrainConfig {
    pub fn score_align(&self) -> ScoreAlignConfig {
        ScoreAlignConfig {
            sigma: self.sigma,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<(), SepoError> {
        let bad = |m: &str| Err(SepoError::Config(m.into()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_groups == 0 {
            return bad("batch_groups must be at least 1");
        }
        if self.interleave.editor == 0 {
            return bad("interleave.editor must be at least 1");
        }
        if self.max_rounds == 0 {
            return bad("max_rounds must be at least 1");
        }
        if self.score_align().validate().is_err() {
            return bad("sigma and epsilon must be positive");
        }
        Ok(())
    }

    fn runs_evaluator(&self) -> bool {
        self.evaluator_loop
            && self.reward_mode != RewardMode::External
            && self.interleave.evaluator > 0
    }

    /// Loop kind of `step` under the interleave schedule.
    pub fn loop_at(&self, step: usize) -> LoopKind {
        if !self.runs_evaluator() {
            return LoopKind::Editor;
        }
        let cycle = (self.interleave.editor + self.interleave.evaluator) as usize;
        if step % cycle < self.interleave.editor as usize {
            LoopKind::Editor
        } else {
            LoopKind::Evaluator
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRecord {
    pub score: f64,
    pub reward: RewardBreakdown,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub reward: RewardBreakdown,
    pub advantage: f64,
    pub self_score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub judge: Option<JudgeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub task: usize,
    pub degenerate: bool,
    pub members: Vec<MemberRecord>,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loop_kind: LoopKind,
    pub loss: f64,
    pub tokens: usize,
    pub mean_self_score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_oracle_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_pairwise_preference: Option<f64>,
    pub groups: Vec<GroupRecord>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    pub log: Vec<StepRecord>,
    /// Editor groups with at least one winner/loser pair.
    pub candidates: Vec<CandidateGroup>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn editor_group(
    cfg: &TrainConfig,
    env: &ToyEnvironment,
    backend: &ToyBackend<'_>,
    task: usize,
    seed: u64,
) -> Result<(RolloutGroup, GroupRecord), SepoError> {
    let input = &env.tasks[task].input;
    let episodes = rollout_group(
        backend,
        &env.sandbox,
        input,
        cfg.group_size,
        cfg.max_rounds,
        seed,
    )?;
    let trajs: Vec<_> = episodes.into_iter().map(|e| e.trajectory).collect();
    let scores: Vec<f64> = trajs.iter().map(|t| t.self_eval().score()).collect();
    let registry = &env.sandbox.registry;
    let rewards = trajs
        .iter()
        .enumerate()
        .map(|(i, t)| match cfg.reward_mode {
            RewardMode::Absolute => editor_reward_absolute(t, registry),
            RewardMode::Pairwise | RewardMode::External => editor_reward(t, i, &scores, registry),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let advantages = group_advantages(&rewards.iter().map(|r| r.total).collect::<Vec<_>>())?;
    let images = trajs
        .iter()
        .map(|t| env.sandbox.store.get(t.final_image()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(AgentError::from)?;
    let oracle: Vec<f64> = images
        .iter()
        .map(|img| env.oracle_score(task, img))
        .collect();

    let judge = if cfg.reward_mode == RewardMode::External {
        let align = cfg.score_align();
        let js: Vec<f64> = images
            .iter()
            .map(|img| env.judge_score(task, img))
            .collect();
        let jr = trajs
            .iter()
            .zip(&js)
            .map(|(t, &j)| {
                let r = RewardBreakdown {
                    format: if t.format_ok() { 1.0 } else { 0.0 },
                    tool_accuracy: None,
                    pairwise_preference: None,
                    absolute_score: None,
                    score_alignment: Some(score_alignment_reward(
                        t.self_eval().score(),
                        j,
                        &align,
                    )?),
                    total: 0.0,
                };
                Ok(RewardBreakdown {
                    total: r.format + r.score_alignment.unwrap_or(0.0),
                    ..r
                })
            })
            .collect::<Result<Vec<_>, SepoError>>()?;
        let ja = group_advantages(&jr.iter().map(|r| r.total).collect::<Vec<_>>())?;
        Some((js, jr, ja))
    } else {
        None
    };

    let mut members = Vec::with_capacity(trajs.len());
    let mut records = Vec::with_capacity(trajs.len());
    for (i, t) in trajs.into_iter().enumerate() {
        let (mask, _) = build_loss_mask_with(&t, LoopKind::Editor, cfg.slm);
        let mut terms = vec![LossTerm {
            mask,
            advantage: advantages[i],
        }];
        let judge_rec = judge.as_ref().map(|(js, jr, ja)| {
            let (mask, _) = build_loss_mask_with(&t, LoopKind::Evaluator, true);
            terms.push(LossTerm {
                mask,
                advantage: ja[i],
            });
            JudgeRecord {
                score: js[i],
                reward: jr[i],
                advantage: ja[i],
            }
        });
        records.push(MemberRecord {
            reward: rewards[i],
            advantage: advantages[i],
            self_score: scores[i],
            oracle_score: Some(oracle[i]),
            target_score: None,
            judge: judge_rec,
        });
        members.push(Member {
            trajectory: MemberTrajectory::Edit(t),
            reward: rewards[i],
            advantage: advantages[i],
            terms,
            oracle_score: Some(oracle[i]),
        });
    }
    let degenerate = members.iter().all(|m| !m.trajectory.format_ok());
    let group = RolloutGroup {
        source: input.source.clone(),
        query: input.query.clone(),
        loop_kind: LoopKind::Editor,
        members,
        degenerate,
    };
    let record = GroupRecord {
        task,
        degenerate,
        members: records,
    };
    Ok((group, record))
}

fn evaluator_group(
    cfg: &TrainConfig,
    env: &ToyEnvironment,
    backend: &ToyBackend<'_>,
    example: usize,
    seed: u64,
) -> Result<(RolloutGroup, GroupRecord), SepoError> {
    let ex = &env.eval_set[example];
    let input = &env.tasks[ex.task].input;
    let align = cfg.score_align();
    let trajs = (0..cfg.group_size)
        .map(|m| {
            run_evaluation(backend, &input.source, &input.query, &ex.history, m, seed).map(|r| r.0)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let rewards = trajs
        .iter()
        .map(|t| evaluator_reward(t, &ex.target, &align))
        .collect::<Result<Vec<_>, _>>()?;
    let advantages = group_advantages(&rewards.iter().map(|r| r.total).collect::<Vec<_>>())?;
    let mut members = Vec::with_capacity(trajs.len());
    let mut records = Vec::with_capacity(trajs.len());
    for (i, t) in trajs.into_iter().enumerate() {
        let (mask, _) = build_loss_mask_with(&t, LoopKind::Evaluator, true);
        records.push(MemberRecord {
            reward: rewards[i],
            advantage: advantages[i],
            self_score: t.prediction().score(),
            oracle_score: None,
            target_score: Some(ex.target.score()),
            judge: None,
        });
        members.push(Member {
            trajectory: MemberTrajectory::Eval(t),
            reward: rewards[i],
            advantage: advantages[i],
            terms: vec![LossTerm {
                mask,
                advantage: advantages[i],
            }],
            oracle_score: None,
        });
    }
    let degenerate = members.iter().all(|m| !m.trajectory.format_ok());
    let group = RolloutGroup {
        source: input.source.clone(),
        query: input.query.clone(),
        loop_kind: LoopKind::Evaluator,
        members,
        degenerate,
    };
    Ok((
        group,
        GroupRecord {
            task: ex.task,
            degenerate,
            members: records,
        },
    ))
}

/// Runs the interleaved schedule on the toy environment, calling `observe`
/// after every step. Deterministic in `cfg.seed`.
pub fn train(
    cfg: &TrainConfig,
    env: &ToyEnvironment,
    policy: &mut ToyPolicy,
    observe: &mut dyn FnMut(&StepRecord),
) -> Result<TrainOutput, SepoError> {
    cfg.validate()?;
    if env.space != policy.space {
        return Err(SepoError::Config(
            "policy and environment use different action spaces".into(),
        ));
    }
    if cfg.runs_evaluator() && env.eval_set.is_empty() {
        return Err(SepoError::Config(
            "evaluator loop enabled but the evaluator dataset is empty".into(),
        ));
    }
    let mut out = TrainOutput::default();
    let (mut editor_steps, mut evaluator_steps) = (0usize, 0usize);
    for step in 0..cfg.steps {
        let kind = cfg.loop_at(step);
        let step_seed = mix(cfg.seed, step as u64);
        let backend = ToyBackend::new(policy);
        let results = match kind {
            LoopKind::Editor => {
                let tasks: Vec<usize> = (0..cfg.batch_groups)
                    .map(|b| (editor_steps * cfg.batch_groups + b) % env.tasks.len())
                    .collect();
                editor_steps += 1;
                par::map_range(tasks.len(), |b| {
                    editor_group(cfg, env, &backend, tasks[b], mix(step_seed, b as u64))
                })
            }
            LoopKind::Evaluator => {
                let examples: Vec<usize> = (0..cfg.batch_groups)
                    .map(|b| (evaluator_steps * cfg.batch_groups + b) % env.eval_set.len())
                    .collect();
                evaluator_steps += 1;
                par::map_range(examples.len(), |b| {
                    evaluator_group(cfg, env, &backend, examples[b], mix(step_seed, b as u64))
                })
            }
        };
        let (groups, records): (Vec<_>, Vec<_>) = results
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .unzip();
        let surrogate = grpo_surrogate(&groups, policy)?;
        for (t, g) in policy.theta.iter_mut().zip(&surrogate.grad) {
            *t -= cfg.learning_rate * g;
        }
        let members = || records.iter().flat_map(|g: &GroupRecord| &g.members);
        let record = StepRecord {
            step,
            loop_kind: kind,
            loss: surrogate.loss,
            tokens: surrogate.tokens,
            mean_self_score: mean(members().map(|m| m.self_score)).unwrap_or(f64::NAN),
            mean_oracle_score: mean(members().filter_map(|m| m.oracle_score)),
            mean_pairwise_preference: mean(members().filter_map(|m| m.reward.pairwise_preference)),
            groups: records,
        };
        observe(&record);
        out.log.push(record);
        if cfg.keep_candidates && kind == LoopKind::Editor {
            out.candidates.extend(
                groups
                    .iter()
                    .filter_map(CandidateGroup::from_rollouts)
                    .filter(|c| !detect_pairs(c).is_empty()),
            );
        }
    }
    Ok(out)
}

/// `(step, mean self-score − mean oracle score)` for every editor step.
pub fn hacking_gap(log: &[StepRecord]) -> Result<Vec<(usize, f64)>, SepoError> {
    log.iter()
        .filter(|r| r.loop_kind == LoopKind::Editor)
        .map(|r| {
            r.mean_oracle_score
                .map(|o| (r.step, r.mean_self_score - o))
                .ok_or(SepoError::MissingOracle(r.step))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::toy::ActionSpace;
    use crate::sepo::toy_env::ToyEnvConfig;

    fn env() -> ToyEnvironment {
        let cfg = ToyEnvConfig {
            tasks: 2,
            eval_examples: 8,
            ..ToyEnvConfig::default()
        };
        ToyEnvironment::new(&cfg, ActionSpace::default()).unwrap()
    }

    fn record(step: usize, kind: LoopKind, self_score: f64, oracle: Option<f64>) -> StepRecord {
        StepRecord {
            step,
            loop_kind: kind,
            loss: 0.0,
            tokens: 0,
            mean_self_score: self_score,
            mean_oracle_score: oracle,
            mean_pairwise_preference: None,
            groups: vec![],
        }
    }

    #[test]
    fn zero_steps_is_empty() {
        let env = env();
        let mut p = ToyPolicy::new(env.space.clone(), 1.0, 0.0);
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let out = train(&cfg, &env, &mut p, &mut |_| {}).unwrap();
        assert!(out.log.is_empty());
    }

    #[test]
    fn schedule_interleaves() {
        let cfg = TrainConfig {
            interleave: Interleave {
                editor: 2,
                evaluator: 1,
            },
            ..TrainConfig::default()
        };
        let kinds: Vec<_> = (0..6).map(|s| cfg.loop_at(s)).collect();
        use LoopKind::*;
        assert_eq!(
            kinds,
            vec![Editor, Editor, Evaluator, Editor, Editor, Evaluator]
        );
        let off = TrainConfig {
            evaluator_loop: false,
            ..cfg.clone()
        };
        assert!((0..6).all(|s| off.loop_at(s) == Editor));
        let ext = TrainConfig {
            reward_mode: RewardMode::External,
            ..cfg
        };
        assert!((0..6).all(|s| ext.loop_at(s) == Editor));
    }

    #[test]
    fn short_runs_are_reproducible() {
        let env = env();
        let cfg = TrainConfig {
            steps: 6,
            batch_groups: 2,
            seed: 3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut p = ToyPolicy::new(env.space.clone(), 1.0, 1.0);
            let out = train(&cfg, &env, &mut p, &mut |_| {}).unwrap();
            (serde_json::to_string(&out.log).unwrap(), p.theta)
        };
        let (a, ta) = run();
        let (b, tb) = run();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert!(a.contains("\"evaluator\""));
    }

    #[test]
    fn external_mode_logs_alignment() {
        let env = env();
        let cfg = TrainConfig {
            steps: 2,
            batch_groups: 1,
            reward_mode: RewardMode::External,
            ..TrainConfig::default()
        };
        let mut p = ToyPolicy::new(env.space.clone(), 1.0, 0.0);
        let out = train(&cfg, &env, &mut p, &mut |_| {}).unwrap();
        let m = &out.log[1].groups[0].members[0];
        assert!(m.judge.as_ref().unwrap().reward.score_alignment.is_some());
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            group_size: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(SepoError::Config(_))));
        let bad = TrainConfig {
            sigma: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn gap_examples() {
        use LoopKind::*;
        let log = vec![
            record(0, Editor, 4.0, Some(4.0)),
            record(1, Evaluator, 3.0, None),
        ];
        assert_eq!(hacking_gap(&log).unwrap(), vec![(0, 0.0)]);
        let log: Vec<_> = (0..3).map(|s| record(s, Editor, 5.0, Some(3.0))).collect();
        assert_eq!(
            hacking_gap(&log).unwrap(),
            vec![(0, 2.0), (1, 2.0), (2, 2.0)]
        );
        assert_eq!(
            hacking_gap(&[record(4, Editor, 5.0, None)]),
            Err(SepoError::MissingOracle(4))
        );
    }
}
