//! Tabular softmax policy over a discrete action space, with exact
//! log-probabilities and gradients.
//!
//! Parameters are laid out as `[edit logits (A) | score table (A × K)]`.
//! An edit action is sampled from `softmax(θ_e / T)`. Given action `a`, the
//! score level is sampled from `softmax((θ_s[a, ·] + γ θ_e[a] c) / T)` where
//! `c_k ∈ [-1, 1]` centres the levels; `γ` couples edit preference to
//! self-confidence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Backend, GenerationContext, GenerationMode, PolicyError, RawModelOutput};
use crate::toolbox::ToolCall;
use crate::trajectory::{Role, Segment};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditAction {
    pub tool: String,
    pub param: String,
    pub value: f64,
}

impl EditAction {
    pub fn call(&self) -> ToolCall {
        ToolCall::new(self.tool.clone()).with(self.param.clone(), self.value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub edits: Vec<EditAction>,
    pub levels: Vec<f64>,
}

impl ActionSpace {
    /// `steps` evenly spaced values per `(tool, param, min, max)` axis and
    /// score levels `1.0, 1.5, …, 5.0`.
    pub fn grid(axes: &[(&str, &str, f64, f64)], steps: usize) -> Self {
        assert!(steps >= 2, "at least two values per axis");
        let mut edits = Vec::new();
        for &(tool, param, lo, hi) in axes {
            for i in 0..steps {
                let value = lo + (hi - lo) * i as f64 / (steps - 1) as f64;
                edits.push(EditAction {
                    tool: tool.into(),
                    param: param.into(),
                    value,
                });
            }
        }
        let levels = (0..9).map(|k| 1.0 + 0.5 * f64::from(k)).collect();
        Self { edits, levels }
    }

    pub fn lookup(&self, call: &ToolCall) -> Option<usize> {
        if call.params.len() != 1 {
            return None;
        }
        self.edits
            .iter()
            .position(|e| e.tool == call.name && call.number(&e.param) == Some(e.value))
    }

    pub fn level_of(&self, score: f64) -> Option<usize> {
        self.levels.iter().position(|&l| (l - score).abs() < 1e-9)
    }
}

impl Default for ActionSpace {
    fn default() -> Self {
        Self::grid(
            &[
                ("exposure", "ev", -1.0, 1.0),
                ("saturation", "s", -40.0, 40.0),
                ("temperature", "t", -40.0, 40.0),
            ],
            5,
        )
    }
}

/// One policy-generated token of a toy trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyAction {
    Edit(usize),
    Score { edit: usize, level: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub space: ActionSpace,
    pub theta: Vec<f64>,
    pub temperature: f64,
    pub coupling: f64,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn sample(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

impl ToyPolicy {
    /// Uniform policy (all parameters zero).
    pub fn new(space: ActionSpace, temperature: f64, coupling: f64) -> Self {
        assert!(temperature > 0.0, "temperature must be positive");
        let n = space.edits.len() * (1 + space.levels.len());
        Self {
            space,
            theta: vec![0.0; n],
            temperature,
            coupling,
        }
    }

    pub fn num_edits(&self) -> usize {
        self.space.edits.len()
    }

    pub fn num_levels(&self) -> usize {
        self.space.levels.len()
    }

    fn centre(&self, k: usize) -> f64 {
        let half = (self.num_levels() - 1) as f64 / 2.0;
        (k as f64 - half) / half
    }

    /// Index of the score logit for level `k` after edit `a`.
    pub fn score_index(&self, a: usize, k: usize) -> usize {
        self.num_edits() + a * self.num_levels() + k
    }

    pub fn edit_probs(&self) -> Vec<f64> {
        let z: Vec<f64> = self.theta[..self.num_edits()]
            .iter()
            .map(|t| t / self.temperature)
            .collect();
        softmax(&z)
    }

    pub fn score_probs(&self, a: usize) -> Vec<f64> {
        let z: Vec<f64> = (0..self.num_levels())
            .map(|k| {
                (self.theta[self.score_index(a, k)]
                    + self.coupling * self.theta[a] * self.centre(k))
                    / self.temperature
            })
            .collect();
        softmax(&z)
    }

    pub fn logprob(&self, action: ToyAction) -> f64 {
        match action {
            ToyAction::Edit(a) => self.edit_probs()[a].ln(),
            ToyAction::Score { edit, level } => self.score_probs(edit)[level].ln(),
        }
    }

    /// `∇_θ log π(action)`.
    pub fn grad_logprob(&self, action: ToyAction) -> Vec<f64> {
        let mut g = vec![0.0; self.theta.len()];
        self.accumulate_grad(action, 1.0, &mut g);
        g
    }

    /// `g += w · ∇_θ log π(action)`.
    pub fn accumulate_grad(&self, action: ToyAction, w: f64, g: &mut [f64]) {
        let t = self.temperature;
        match action {
            ToyAction::Edit(a) => {
                for (j, p) in self.edit_probs().into_iter().enumerate() {
                    let delta = if j == a { 1.0 } else { 0.0 };
                    g[j] += w * (delta - p) / t;
                }
            }
            ToyAction::Score { edit, level } => {
                let p = self.score_probs(edit);
                let mut mean_c = 0.0;
                for (k, pk) in p.iter().enumerate() {
                    let delta = if k == level { 1.0 } else { 0.0 };
                    g[self.score_index(edit, k)] += w * (delta - pk) / t;
                    mean_c += pk * self.centre(k);
                }
                g[edit] += w * self.coupling * (self.centre(level) - mean_c) / t;
            }
        }
    }

    pub fn sample_edit(&self, rng: &mut impl Rng) -> usize {
        sample(&self.edit_probs(), rng)
    }

    pub fn sample_level(&self, edit: usize, rng: &mut impl Rng) -> usize {
        sample(&self.score_probs(edit), rng)
    }

    /// Maps each policy-generated token of `segments` to its toy action, in
    /// the order used by loss masks. Think text and rationales must carry
    /// zero tokens, each tool call one token and each answer one token.
    pub fn tokens(&self, segments: &[Segment]) -> Result<Vec<(Role, ToyAction)>, PolicyError> {
        let mut out = Vec::new();
        let mut last_edit = None;
        for seg in segments {
            match seg {
                Segment::Observation(_) => {}
                Segment::Think(t) | Segment::Reflection(t) => {
                    if t.tokens != 0 {
                        return Err(PolicyError::UnknownAction(
                            "think text carries tokens".into(),
                        ));
                    }
                }
                Segment::ToolCall(step) => {
                    if step.tokens as usize != step.calls.len() {
                        return Err(PolicyError::UnknownAction(
                            "one token per tool call expected".into(),
                        ));
                    }
                    for call in &step.calls {
                        let a = self
                            .space
                            .lookup(call)
                            .ok_or_else(|| PolicyError::UnknownAction(call.render()))?;
                        out.push((Role::ToolCall, ToyAction::Edit(a)));
                        last_edit = Some(a);
                    }
                }
                Segment::SelfEval(s) => {
                    if s.rationale_tokens != 0 || s.answer_tokens != 1 {
                        return Err(PolicyError::UnknownAction(
                            "one answer token expected".into(),
                        ));
                    }
                    let edit = last_edit.ok_or_else(|| {
                        PolicyError::UnknownAction("score before any edit".into())
                    })?;
                    let level = self.space.level_of(s.score()).ok_or_else(|| {
                        PolicyError::UnknownAction(format!("score {}", s.score()))
                    })?;
                    out.push((Role::SelfEval, ToyAction::Score { edit, level }));
                }
            }
        }
        Ok(out)
    }
}

/// Serves a [`ToyPolicy`] through the [`Backend`] interface. One edit per
/// round; the answer conditions on the most recent edit in the history.
#[derive(Debug, Clone, Copy)]
pub struct ToyBackend<'a> {
    pub policy: &'a ToyPolicy,
}

impl<'a> ToyBackend<'a> {
    pub fn new(policy: &'a ToyPolicy) -> Self {
        Self { policy }
    }
}

impl Backend for ToyBackend<'_> {
    fn generate(&self, ctx: &GenerationContext) -> Result<RawModelOutput, PolicyError> {
        ctx.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.stream_seed());
        let space = &self.policy.space;
        match ctx.mode {
            GenerationMode::EditStep => {
                let a = self.policy.sample_edit(&mut rng);
                let text = format!(
                    "<think>step</think><tool_call>{}</tool_call>",
                    space.edits[a].call().render()
                );
                Ok(RawModelOutput::with_tokens(text, vec![0, 1]))
            }
            GenerationMode::FinalSelfEval | GenerationMode::EvaluatorOnly => {
                let last = ctx
                    .history
                    .iter()
                    .rev()
                    .find_map(|s| match s {
                        Segment::ToolCall(step) => step.calls.last(),
                        _ => None,
                    })
                    .ok_or_else(|| PolicyError::UnknownAction("no edit to score".into()))?;
                let a = space
                    .lookup(last)
                    .ok_or_else(|| PolicyError::UnknownAction(last.render()))?;
                let k = self.policy.sample_level(a, &mut rng);
                let text = format!(
                    "<think>done</think><answer>score: {}</answer>",
                    space.levels[k]
                );
                Ok(RawModelOutput::with_tokens(text, vec![0, 1]))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;

    use super::*;

    fn random_policy(seed: u64, t: f64, coupling: f64) -> ToyPolicy {
        let mut p = ToyPolicy::new(ActionSpace::default(), t, coupling);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut p.theta {
            *v = rng.random_range(-2.0..2.0);
        }
        p
    }

    fn all_actions(p: &ToyPolicy) -> Vec<ToyAction> {
        let mut v: Vec<_> = (0..p.num_edits()).map(ToyAction::Edit).collect();
        for edit in 0..p.num_edits() {
            for level in 0..p.num_levels() {
                v.push(ToyAction::Score { edit, level });
            }
        }
        v
    }

    #[test]
    fn gradient_matches_central_differences() {
        let p = random_policy(3, 0.7, 0.8);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for action in all_actions(&p) {
            let g = p.grad_logprob(action);
            for (i, &gi) in g.iter().enumerate() {
                let mut up = p.clone();
                up.theta[i] += h;
                let mut down = p.clone();
                down.theta[i] -= h;
                let fd = (up.logprob(action) - down.logprob(action)) / (2.0 * h);
                let scale = gi.abs().max(fd.abs());
                if scale > 0.0 {
                    worst = worst.max((gi - fd).abs() / scale.max(1e-4));
                }
            }
        }
        assert!(worst < 1e-6, "max relative error {worst:e}");
    }

    #[test]
    fn huge_temperature_is_uniform() {
        let p = random_policy(5, 1e12, 0.5);
        let n = p.num_edits() as f64;
        assert!(p.edit_probs().iter().all(|q| (q - 1.0 / n).abs() < 1e-9));
        let k = p.num_levels() as f64;
        assert!(p.score_probs(2).iter().all(|q| (q - 1.0 / k).abs() < 1e-9));
    }

    #[test]
    fn backend_is_seed_deterministic() {
        let p = random_policy(9, 1.0, 0.0);
        let store = crate::toolbox::MemoryStore::new();
        let src =
            crate::toolbox::ImageStore::put(&store, &crate::trajectory::tests::sample_source())
                .unwrap();
        let ctx = GenerationContext {
            source: src,
            query: "q".into(),
            history: vec![],
            mode: GenerationMode::EditStep,
            member: 2,
            turn: 0,
            seed: 11,
        };
        let b = ToyBackend::new(&p);
        assert_eq!(b.generate(&ctx).unwrap(), b.generate(&ctx).unwrap());
        let parsed = b.generate(&ctx).unwrap().parse();
        assert!(parsed.format_ok);
        assert!(p.space.lookup(&parsed.calls().0[0]).is_some());
    }

    proptest! {
        #[test]
        fn distributions_normalise(seed in any::<u64>(), t in 0.05f64..20.0, c in -2.0f64..2.0) {
            let p = random_policy(seed, t, c);
            prop_assert!((p.edit_probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for a in 0..p.num_edits() {
                prop_assert!((p.score_probs(a).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
