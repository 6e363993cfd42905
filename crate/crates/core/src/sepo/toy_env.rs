//! Reference toy environment for the training dynamics.
//!
//! Sources are small synthetic gradients. Every task shares one hidden
//! target edit; the oracle scores an output by its L1 distance to the
//! target image relative to the untouched source:
//! `1 + 4 · max(0, 1 − L1(out, target) / L1(source, target))`.
//! The static judge used by the external-reward ablation adds a bias
//! proportional to the relative chroma gain, so it rewards oversaturation.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EditInput, SepoError};
use crate::agent::Sandbox;
use crate::policy::toy::{ActionSpace, EditAction};
use crate::policy::ToyPolicy;
use crate::toolbox::{execute_lenient, ImageBuffer, ImageStore, MemoryStore, Registry};
use crate::trajectory::{
    EditHistory, Round, SelfEvaluation, Think, ToolStep, MAX_SCORE, MIN_SCORE,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyEnvConfig {
    pub tasks: usize,
    pub size: u32,
    pub eval_examples: usize,
    pub target: EditAction,
    pub judge_bias: f64,
    /// Curvature of the initial score prior around each edit's mean oracle
    /// score; 0 starts from a uniform self-evaluator.
    pub calibration: f64,
    /// Sampling temperature of the initial toy policy.
    pub policy_temperature: f64,
    /// Edit-to-score coupling of the initial toy policy.
    pub coupling: f64,
    pub seed: u64,
}

impl Default for ToyEnvConfig {
    fn default() -> Self {
        Self {
            tasks: 8,
            size: 12,
            eval_examples: 64,
            target: EditAction {
                tool: "exposure".into(),
                param: "ev".into(),
                value: 0.4,
            },
            judge_bias: 5.0,
            calibration: 2.0,
            policy_temperature: 1.0,
            coupling: 0.5,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyTask {
    pub input: EditInput,
    target: ImageBuffer,
    baseline: f64,
    chroma: f64,
}

/// An evaluator-loop quadruple: task source and query, an edit history and
/// the oracle's score for it.
#[derive(Debug, Clone)]
pub struct EvalExample {
    pub task: usize,
    pub history: EditHistory,
    pub target: SelfEvaluation,
}

pub struct ToyEnvironment {
    pub sandbox: Sandbox,
    pub space: ActionSpace,
    pub tasks: Vec<ToyTask>,
    pub eval_set: Vec<EvalExample>,
    judge_bias: f64,
    calibration: f64,
    policy_temperature: f64,
    coupling: f64,
}

fn l1(a: &ImageBuffer, b: &ImageBuffer) -> Option<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return None;
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum();
    Some(s / a.data().len() as f64)
}

fn mean_chroma(img: &ImageBuffer) -> f64 {
    let n = (img.width() * img.height()) as f64;
    img.pixels()
        .map(|p| {
            p.iter().copied().fold(f64::MIN, f64::max) - p.iter().copied().fold(f64::MAX, f64::min)
        })
        .sum::<f64>()
        / n
}

impl ToyEnvironment {
    pub fn new(cfg: &ToyEnvConfig, space: ActionSpace) -> Result<Self, SepoError> {
        Self::with_store(cfg, space, Arc::new(MemoryStore::new()))
    }

    /// Like [`new`](Self::new), keeping every image in `store`.
    pub fn with_store(
        cfg: &ToyEnvConfig,
        space: ActionSpace,
        store: Arc<dyn ImageStore>,
    ) -> Result<Self, SepoError> {
        if !(cfg.calibration >= 0.0 && cfg.calibration.is_finite()) {
            return Err(SepoError::Config(
                "calibration must be finite and non-negative".into(),
            ));
        }
        if !(cfg.policy_temperature > 0.0
            && cfg.policy_temperature.is_finite()
            && cfg.coupling.is_finite())
        {
            return Err(SepoError::Config(
                "policy temperature must be positive and coupling finite".into(),
            ));
        }
        if cfg.tasks == 0 || cfg.size == 0 {
            return Err(SepoError::Config(
                "toy environment needs at least one task and a positive size".into(),
            ));
        }
        let registry = Arc::new(Registry::builtin());
        let target_call = cfg.target.call();
        if !registry.validate(&target_call).is_valid() {
            return Err(SepoError::Config(format!(
                "target edit {} is not a valid call",
                target_call.render()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n = cfg.size;
        let mut tasks = Vec::with_capacity(cfg.tasks);
        for _ in 0..cfg.tasks {
            let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.45));
            let slope: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.3));
            let img = ImageBuffer::from_fn(n, n, |x, y| {
                let u = f64::from(x) / f64::from(n);
                let v = f64::from(y) / f64::from(n);
                std::array::from_fn(|c| base[c] + slope[c] * if c == 1 { v } else { u })
            })
            .quantized();
            let target = execute_lenient(&img, std::slice::from_ref(&target_call), &registry);
            let baseline = l1(&img, &target).expect("same size");
            let source = store.put(&img).map_err(crate::agent::AgentError::from)?;
            tasks.push(ToyTask {
                chroma: mean_chroma(&img),
                input: EditInput {
                    source,
                    image: Arc::new(img),
                    query: "brighten slightly".into(),
                },
                target,
                baseline,
            });
        }
        let sandbox = Sandbox::new(registry, store);
        let mut env = Self {
            sandbox,
            space,
            tasks,
            eval_set: Vec::new(),
            judge_bias: cfg.judge_bias,
            calibration: cfg.calibration,
            policy_temperature: cfg.policy_temperature,
            coupling: cfg.coupling,
        };
        for _ in 0..cfg.eval_examples {
            let task = rng.random_range(0..env.tasks.len());
            let action = rng.random_range(0..env.space.edits.len());
            env.eval_set.push(env.example(task, action)?);
        }
        Ok(env)
    }

    fn example(&self, task: usize, action: usize) -> Result<EvalExample, SepoError> {
        let t = &self.tasks[task];
        let tools = ToolStep::new(vec![self.space.edits[action].call()], 1);
        let out = execute_lenient(&t.input.image, &tools.calls, &self.sandbox.registry);
        let observation = self
            .sandbox
            .store
            .put(&out)
            .map_err(crate::agent::AgentError::from)?;
        let history = EditHistory {
            rounds: vec![Round {
                think: Think::new("step", 0),
                tools,
                observation,
            }],
            final_think: Think::new("done", 0),
        };
        let target = SelfEvaluation::new("oracle", self.oracle_score(task, &out))
            .map_err(crate::agent::AgentError::from)?;
        Ok(EvalExample {
            task,
            history,
            target,
        })
    }

    pub fn oracle_score(&self, task: usize, img: &ImageBuffer) -> f64 {
        let t = &self.tasks[task];
        match l1(img, &t.target) {
            Some(d) => MIN_SCORE + (MAX_SCORE - MIN_SCORE) * (1.0 - d / t.baseline).max(0.0),
            None => MIN_SCORE,
        }
    }

    /// Oracle plus a chroma bonus, clamped to `[1, 5]`.
    pub fn judge_score(&self, task: usize, img: &ImageBuffer) -> f64 {
        let t = &self.tasks[task];
        let gain = (mean_chroma(img) - t.chroma) / t.chroma;
        (self.oracle_score(task, img) + self.judge_bias * gain).clamp(MIN_SCORE, MAX_SCORE)
    }

    /// A policy with uniform edit preference whose score table is a
    /// quadratic prior peaked at each edit's task-averaged oracle score.
    pub fn initial_policy(&self) -> ToyPolicy {
        let mut policy = ToyPolicy::new(self.space.clone(), self.policy_temperature, self.coupling);
        let n = self.tasks.len() as f64;
        let mut mean = vec![0.0; self.space.edits.len()];
        for task in 0..self.tasks.len() {
            for (m, s) in mean.iter_mut().zip(self.oracle_table(task)) {
                *m += s / n;
            }
        }
        for (a, m) in mean.iter().enumerate() {
            for (k, level) in self.space.levels.iter().enumerate() {
                let i = policy.score_index(a, k);
                policy.theta[i] = -self.calibration * (level - m).powi(2);
            }
        }
        policy
    }

    /// Oracle score of each action on `task`, in action-space order.
    pub fn oracle_table(&self, task: usize) -> Vec<f64> {
        let t = &self.tasks[task];
        self.space
            .edits
            .iter()
            .map(|e| {
                let out = execute_lenient(&t.input.image, &[e.call()], &self.sandbox.registry);
                self.oracle_score(task, &out)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_peaks_at_nearest_grid_edit() {
        let env = ToyEnvironment::new(&ToyEnvConfig::default(), ActionSpace::default()).unwrap();
        let ev = |v: f64| {
            env.space
                .lookup(&crate::toolbox::ToolCall::new("exposure").with("ev", v))
                .unwrap()
        };
        for task in 0..env.tasks.len() {
            let table = env.oracle_table(task);
            let best = (0..table.len())
                .max_by(|&a, &b| table[a].total_cmp(&table[b]))
                .unwrap();
            assert_eq!(best, ev(0.5));
            // the target itself is off-grid, so no single action is perfect
            assert!(table[best] < MAX_SCORE && table[best] > 3.0);
            assert!(table.iter().all(|s| (MIN_SCORE..=MAX_SCORE).contains(s)));
            assert_eq!(table[ev(0.0)], MIN_SCORE);
        }
        assert_eq!(env.eval_set.len(), 64);
    }

    #[test]
    fn exact_target_scores_five() {
        let env = ToyEnvironment::new(&ToyEnvConfig::default(), ActionSpace::default()).unwrap();
        let t = &env.tasks[0];
        let out = execute_lenient(
            &t.input.image,
            &[ToyEnvConfig::default().target.call()],
            &env.sandbox.registry,
        );
        assert_eq!(env.oracle_score(0, &out), MAX_SCORE);
    }

    #[test]
    fn initial_policy_is_calibrated() {
        let env = ToyEnvironment::new(&ToyEnvConfig::default(), ActionSpace::default()).unwrap();
        let p = env.initial_policy();
        let edits = p.edit_probs();
        assert!(edits.iter().all(|q| (q - edits[0]).abs() < 1e-15));
        let table = env.oracle_table(0);
        for (a, want) in table.iter().enumerate() {
            let probs = p.score_probs(a);
            let mode = (0..probs.len())
                .max_by(|&i, &j| probs[i].total_cmp(&probs[j]))
                .unwrap();
            assert!((env.space.levels[mode] - want).abs() <= 0.75, "edit {a}");
        }
        let flat = ToyEnvironment::new(
            &ToyEnvConfig {
                calibration: 0.0,
                ..Default::default()
            },
            ActionSpace::default(),
        )
        .unwrap();
        assert!(flat.initial_policy().theta.iter().all(|&t| t == 0.0));
    }

    #[test]
    fn judge_prefers_saturation() {
        let env = ToyEnvironment::new(&ToyEnvConfig::default(), ActionSpace::default()).unwrap();
        let img = &env.tasks[0].input.image;
        let sat = execute_lenient(
            img,
            &[crate::toolbox::ToolCall::new("saturation").with("s", 40.0)],
            &env.sandbox.registry,
        );
        assert!(env.judge_score(0, &sat) > env.oracle_score(0, &sat) + 1.0);
    }
}
