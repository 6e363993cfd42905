use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Backend, GenerationContext, GenerationMode, PolicyError, RawModelOutput};

/// Pre-recorded outputs. `rollouts[m][t]` answers turn `t` of group member
/// `m % rollouts.len()`; `evaluator[m % evaluator.len()]` answers
/// evaluator-only requests.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    #[serde(default)]
    pub rollouts: Vec<Vec<RawModelOutput>>,
    #[serde(default)]
    pub evaluator: Vec<RawModelOutput>,
}

/// Deterministic backend replaying a [`Script`]; ignores the seed.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    script: Script,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        Self { script }
    }

    pub fn from_file(path: &Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PolicyError::BackendUnavailable(format!("{}: {e}", path.display())))?;
        let script = serde_json::from_str(&text)
            .map_err(|e| PolicyError::BackendUnavailable(format!("{}: {e}", path.display())))?;
        Ok(Self::new(script))
    }
}

impl Backend for ScriptedBackend {
    fn generate(&self, ctx: &GenerationContext) -> Result<RawModelOutput, PolicyError> {
        ctx.validate()?;
        let exhausted = PolicyError::ScriptExhausted {
            member: ctx.member,
            turn: ctx.turn,
        };
        let out = if ctx.mode == GenerationMode::EvaluatorOnly {
            let n = self.script.evaluator.len();
            (n > 0).then(|| &self.script.evaluator[ctx.member % n])
        } else {
            let n = self.script.rollouts.len();
            (n > 0)
                .then(|| &self.script.rollouts[ctx.member % n])
                .and_then(|r| r.get(ctx.turn as usize))
        };
        out.cloned().ok_or(exhausted)
    }
}
