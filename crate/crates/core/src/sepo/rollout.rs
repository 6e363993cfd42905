use std::sync::Arc;

use crate::agent::{run_episode, AgentError, Episode, EpisodeSpec, Sandbox};
use crate::par;
use crate::policy::{mix, Backend};
use crate::toolbox::{ImageBuffer, ImageRef};

use super::SepoError;

/// One editing input: a stored source image and its instruction.
#[derive(Debug, Clone, PartialEq)]
pub struct EditInput {
    pub source: ImageRef,
    pub image: Arc<ImageBuffer>,
    pub query: String,
}

/// Samples `g` rollouts for `input`, concurrently when the `parallel`
/// feature is on. Member `i` uses stream `(seed, i)`, so the group is
/// reproducible regardless of scheduling.
pub fn rollout_group(
    backend: &dyn Backend,
    sandbox: &Sandbox,
    input: &EditInput,
    g: usize,
    max_rounds: u32,
    seed: u64,
) -> Result<Vec<Episode>, SepoError> {
    if g < 2 {
        return Err(SepoError::GroupTooSmall(g));
    }
    let base = mix(seed, 0x0067_726f_7570);
    let episodes: Vec<Result<Episode, AgentError>> = par::map_range(g, |member| {
        run_episode(
            backend,
            sandbox,
            EpisodeSpec {
                source: &input.source,
                source_image: &input.image,
                query: &input.query,
                max_rounds,
                member,
                seed: base,
            },
        )
    });
    Ok(episodes.into_iter().collect::<Result<Vec<_>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{RawModelOutput, Script, ScriptedBackend};
    use crate::toolbox::{ImageStore, MemoryStore, Registry};
    use crate::trajectory::tests::sample_source;

    fn setup() -> (Sandbox, EditInput) {
        let store = Arc::new(MemoryStore::new());
        let img = sample_source();
        let source = store.put(&img).unwrap();
        let sb = Sandbox::new(Arc::new(Registry::builtin()), store);
        let input = EditInput {
            source,
            image: Arc::new(img),
            query: "warmer".into(),
        };
        (sb, input)
    }

    #[test]
    fn scripted_group_replays() {
        let (sb, input) = setup();
        let rollouts = (0..4)
            .map(|i| {
                vec![
                    RawModelOutput::new(format!(
                        "<think>w</think><tool_call>{{temperature, t: {}}}</tool_call>",
                        10 * i
                    )),
                    RawModelOutput::new(format!(
                        "<think>f</think><answer>score: {}</answer>",
                        1 + i
                    )),
                ]
            })
            .collect();
        let backend = ScriptedBackend::new(Script {
            rollouts,
            evaluator: vec![],
        });
        let group = rollout_group(&backend, &sb, &input, 4, 4, 1).unwrap();
        assert_eq!(group.len(), 4);
        for (i, ep) in group.iter().enumerate() {
            let t = &ep.trajectory;
            assert_eq!(t.self_eval().score(), 1.0 + i as f64);
            let img = t.replay(&input.image, &sb.registry).unwrap();
            assert!(t.final_image().matches(&img));
        }
        assert_eq!(
            group,
            rollout_group(&backend, &sb, &input, 4, 4, 1).unwrap()
        );
    }

    #[test]
    fn rejects_singleton_groups() {
        let (sb, input) = setup();
        let backend = ScriptedBackend::new(Script::default());
        assert!(matches!(
            rollout_group(&backend, &sb, &input, 1, 4, 0),
            Err(SepoError::GroupTooSmall(1))
        ));
    }
}
