//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails. Built with `harness = false` so the lines
//! are always visible.

use std::io::BufReader;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sepolab::agent::{run_episode, run_evaluation, EpisodeSpec, Sandbox};
use sepolab::datagen::{
    records_from_sources, Pipeline, Record, ScriptedAnnotator, SourceEntry, Stage,
};
use sepolab::metrics::{pixel_metrics, plcc, srcc, JudgeScores};
use sepolab::policy::toy::ActionSpace;
use sepolab::policy::{RawModelOutput, Script, ScriptedBackend, ToyBackend, ToyPolicy};
use sepolab::reflection::{
    build_reflection_trajectory, detect_pairs, export_sft, reflect_groups, CandidateGroup,
    ScriptedRationale,
};
use sepolab::rewards::{
    pairwise_preference_rewards, score_alignment_reward, RewardBreakdown, ScoreAlignConfig,
};
use sepolab::sepo::{
    build_loss_mask_with, group_advantages, grpo_surrogate, rollout_group, train, LoopKind,
    LossTerm, Member, MemberTrajectory, RewardMode, RolloutGroup, StepRecord, ToyEnvConfig,
    ToyEnvironment, TrainConfig,
};
use sepolab::toolbox::{
    apply, apply_sequence, write_png, DirStore, ImageBuffer, ImageStore, MemoryStore, ParamKind,
    ParamValue,
};
use sepolab::trajectory::{
    parse, parse_jsonl, serialize, AnyTrajectory, EditTrajectoryBuilder, SelfEvalSegment,
    SelfEvaluation, Think, ToolStep,
};
use sepolab::{EditTrajectory, Registry, ToolCall};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(t: Instant, limit: Duration) -> Result<String, String> {
    let e = t.elapsed();
    check(e < limit, || format!("took {e:.2?}, limit {limit:?}"))?;
    Ok(format!("{e:.2?}"))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- fixtures

fn random_image(r: &mut ChaCha8Rng) -> ImageBuffer {
    let (w, h) = (r.random_range(2..10), r.random_range(2..10));
    ImageBuffer::from_fn(w, h, |_, _| [r.random(), r.random(), r.random()])
}

fn random_curve(r: &mut ChaCha8Rng, max_points: usize) -> Vec<[f64; 2]> {
    let k = r.random_range(2..=max_points);
    let mut xs: Vec<f64> = (0..k).map(|_| r.random()).collect();
    let mut ys: Vec<f64> = (0..k).map(|_| r.random()).collect();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    xs.dedup();
    xs.iter().zip(ys).map(|(x, y)| [*x, y]).collect()
}

/// A random call that passes validation; masks wrap a random inner call.
fn random_call(r: &mut ChaCha8Rng, registry: &Registry, depth: u32) -> ToolCall {
    let names: Vec<String> = registry.names().map(str::to_string).collect();
    loop {
        let spec = registry
            .get(&names[r.random_range(0..names.len())])
            .unwrap();
        let mut call = ToolCall::new(spec.name.clone());
        let mut nested = false;
        for p in &spec.params {
            call = match &p.kind {
                ParamKind::Range { min, max, .. } => {
                    call.with(p.name.clone(), r.random_range(*min..=*max))
                }
                ParamKind::Choice { options, .. } => {
                    call.with(p.name.clone(), options[r.random_range(0..options.len())])
                }
                ParamKind::Curve { max_points } => call.with(
                    p.name.clone(),
                    ParamValue::Curve(random_curve(r, *max_points)),
                ),
                ParamKind::Adjustment => {
                    nested = true;
                    if depth > 0 {
                        break;
                    }
                    call.with(
                        p.name.clone(),
                        ParamValue::Call(Box::new(random_call(r, registry, depth + 1))),
                    )
                }
            };
        }
        if !(nested && depth > 0) && registry.validate(&call).is_valid() {
            return call;
        }
    }
}

fn random_trajectory(
    r: &mut ChaCha8Rng,
    store: &MemoryStore,
    registry: &Arc<Registry>,
) -> EditTrajectory {
    let img = random_image(r);
    let source = store.put(&img).unwrap();
    random_history(r, store, registry, &source, &img, "make it pop")
}

fn random_history(
    r: &mut ChaCha8Rng,
    store: &MemoryStore,
    registry: &Arc<Registry>,
    source: &sepolab::ImageRef,
    img: &ImageBuffer,
    query: &str,
) -> EditTrajectory {
    let max_rounds = r.random_range(1..=4);
    let mut b =
        EditTrajectoryBuilder::new(source.clone(), img, query, max_rounds, registry.clone())
            .unwrap();
    for _ in 0..r.random_range(1..=max_rounds) {
        let calls: Vec<ToolCall> = (0..r.random_range(1..=3))
            .map(|_| random_call(r, registry, 0))
            .collect();
        let tools = ToolStep::new(calls, r.random_range(1..40));
        let obs = store.put(&b.preview(&tools)).unwrap();
        let think = Think::new(
            format!("step note {}", r.random::<u16>()),
            r.random_range(0..30),
        );
        b.append_round(think, tools, obs).unwrap();
    }
    if r.random_bool(0.2) {
        b.mark_malformed();
    }
    let score = (r.random_range(4..=20) as f64) / 4.0;
    let eval = SelfEvalSegment::new(
        SelfEvaluation::new("assessment", score).unwrap(),
        r.random_range(0..20),
        3,
    );
    b.finalize(Think::new("final", 2), eval).unwrap()
}

fn toy_env() -> ToyEnvironment {
    let cfg = ToyEnvConfig {
        tasks: 3,
        eval_examples: 6,
        ..ToyEnvConfig::default()
    };
    ToyEnvironment::new(&cfg, ActionSpace::default()).unwrap()
}

fn breakdown() -> RewardBreakdown {
    RewardBreakdown {
        format: 1.0,
        tool_accuracy: None,
        pairwise_preference: None,
        absolute_score: None,
        score_alignment: None,
        total: 0.0,
    }
}

fn member(traj: MemberTrajectory, kind: LoopKind, slm: bool, advantage: f64) -> Member {
    let (mask, _) = build_loss_mask_with(&traj, kind, slm);
    Member {
        trajectory: traj,
        reward: breakdown(),
        advantage,
        terms: vec![LossTerm { mask, advantage }],
        oracle_score: None,
    }
}

/// Random editor and evaluator groups sampled from `policy` with random
/// advantages.
fn random_batch(
    r: &mut ChaCha8Rng,
    env: &ToyEnvironment,
    policy: &ToyPolicy,
    editor_slm: Option<bool>,
    evaluator: bool,
) -> Vec<RolloutGroup> {
    let backend = ToyBackend::new(policy);
    let mut groups = Vec::new();
    if let Some(slm) = editor_slm {
        for _ in 0..r.random_range(1..=2) {
            let task = &env.tasks[r.random_range(0..env.tasks.len())];
            let g = r.random_range(2..=4);
            let eps = rollout_group(&backend, &env.sandbox, &task.input, g, 1, r.random()).unwrap();
            groups.push(RolloutGroup {
                source: task.input.source.clone(),
                query: task.input.query.clone(),
                loop_kind: LoopKind::Editor,
                members: eps
                    .into_iter()
                    .map(|e| {
                        member(
                            MemberTrajectory::Edit(e.trajectory),
                            LoopKind::Editor,
                            slm,
                            r.random_range(-2.0..2.0),
                        )
                    })
                    .collect(),
                degenerate: false,
            });
        }
    }
    if evaluator {
        let ex = &env.eval_set[r.random_range(0..env.eval_set.len())];
        let input = &env.tasks[ex.task].input;
        let seed = r.random();
        let members = (0..r.random_range(2..=4))
            .map(|m| {
                let (t, _) =
                    run_evaluation(&backend, &input.source, &input.query, &ex.history, m, seed)
                        .unwrap();
                member(
                    MemberTrajectory::Eval(t),
                    LoopKind::Evaluator,
                    true,
                    r.random_range(-2.0..2.0),
                )
            })
            .collect();
        groups.push(RolloutGroup {
            source: input.source.clone(),
            query: input.query.clone(),
            loop_kind: LoopKind::Evaluator,
            members,
            degenerate: false,
        });
    }
    groups
}

fn random_policy(r: &mut ChaCha8Rng, space: &ActionSpace, coupling: f64) -> ToyPolicy {
    let mut p = ToyPolicy::new(space.clone(), r.random_range(0.5..2.0), coupling);
    for t in &mut p.theta {
        *t = r.random_range(-2.0..2.0);
    }
    p
}

fn score_indices(p: &ToyPolicy) -> Vec<usize> {
    (0..p.num_edits())
        .flat_map(|a| (0..p.num_levels()).map(move |k| (a, k)))
        .map(|(a, k)| p.score_index(a, k))
        .collect()
}

// --------------------------------------------------------------- criteria

fn c1_reward_oracles() -> Outcome {
    let t = Instant::now();
    let mut r = rng(1);
    for _ in 0..1000 {
        let g = r.random_range(2..=8);
        let distinct = r.random_bool(0.5);
        let scores: Vec<f64> = if distinct {
            let mut pool: Vec<f64> = (0..40).map(|k| 1.0 + k as f64 * 0.1).collect();
            (0..g)
                .map(|_| pool.swap_remove(r.random_range(0..pool.len())))
                .collect()
        } else {
            (0..g).map(|_| r.random_range(1..=5) as f64).collect()
        };
        let got = pairwise_preference_rewards(&scores).map_err(|e| e.to_string())?;
        let mut wins = vec![0usize; g];
        for i in 0..g {
            for j in i + 1..g {
                if scores[i] > scores[j] {
                    wins[i] += 1;
                } else if scores[j] > scores[i] {
                    wins[j] += 1;
                }
            }
        }
        let oracle: Vec<f64> = wins.iter().map(|&w| w as f64 / (g - 1) as f64).collect();
        check(got == oracle, || {
            format!("scores {scores:?}: {got:?} vs {oracle:?}")
        })?;
        if distinct {
            let won: f64 = got.iter().map(|v| (v * (g - 1) as f64).round()).sum();
            check(won == (g * (g - 1) / 2) as f64, || {
                format!("{won} wins for G={g}")
            })?;
        }
    }
    Ok(format!(
        "1000 groups exact, {}",
        within(t, Duration::from_secs(5))?
    ))
}

fn c2_score_alignment() -> Outcome {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let (pred, target) = (r.random_range(1.0..=5.0), r.random_range(1.0..=5.0));
        let cfg = ScoreAlignConfig {
            sigma: r.random_range(0.05..5.0),
            epsilon: r.random_range(1e-6..0.1),
        };
        let got = score_alignment_reward(pred, target, &cfg).map_err(|e| e.to_string())?;
        let delta: f64 = pred - target;
        let direct = (-0.5 * (delta / cfg.sigma).powi(2)).exp() + cfg.epsilon;
        worst = worst.max((got - direct).abs());
    }
    check(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("10k points, max deviation {worst:.1e}"))
}

fn c3_gradient_check() -> Outcome {
    let t = Instant::now();
    let env = toy_env();
    let mut r = rng(3);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let coupling = r.random_range(0.0..1.5);
        let policy = random_policy(&mut r, &env.space, coupling);
        let (slm, evaluator) = (r.random_bool(0.5), r.random_bool(0.5));
        let groups = random_batch(&mut r, &env, &policy, Some(slm), evaluator);
        let analytic = grpo_surrogate(&groups, &policy)
            .map_err(|e| e.to_string())?
            .grad;
        let mut p = policy.clone();
        let mut numeric = vec![0.0; analytic.len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let base = p.theta[i];
            p.theta[i] = base + h;
            let up = grpo_surrogate(&groups, &p).unwrap().loss;
            p.theta[i] = base - h;
            let down = grpo_surrogate(&groups, &p).unwrap().loss;
            p.theta[i] = base;
            *n = (up - down) / (2.0 * h);
        }
        let scale = numeric
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-12);
        let err = analytic
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
            / scale;
        worst = worst.max(err);
    }
    check(worst < 1e-5, || format!("max relative error {worst:e}"))?;
    Ok(format!(
        "100 batches, max relative error {worst:.1e}, {}",
        within(t, Duration::from_secs(30))?
    ))
}

fn c4_slm_soundness() -> Outcome {
    let env = toy_env();
    let mut r = rng(4);
    for _ in 0..50 {
        // editor loop: self-evaluation tokens are masked out
        let coupling = r.random_range(0.0..1.5);
        let policy = random_policy(&mut r, &env.space, coupling);
        let groups = random_batch(&mut r, &env, &policy, Some(true), false);
        let base = grpo_surrogate(&groups, &policy).unwrap();
        let scores = score_indices(&policy);
        check(scores.iter().all(|&i| base.grad[i] == 0.0), || {
            "editor gradient touches score logits".into()
        })?;
        let mut p = policy.clone();
        for &i in &scores {
            p.theta[i] += r.random_range(-5.0..5.0);
        }
        let moved = grpo_surrogate(&groups, &p).unwrap();
        check(moved.loss == base.loss, || {
            format!("editor loss moved {} -> {}", base.loss, moved.loss)
        })?;

        // evaluator loop: only self-evaluation tokens train; edit logits
        // reach score logits through the coupling, so decouple first
        let policy = random_policy(&mut r, &env.space, 0.0);
        let groups = random_batch(&mut r, &env, &policy, None, true);
        let base = grpo_surrogate(&groups, &policy).unwrap();
        let edits: Vec<usize> = (0..policy.theta.len())
            .filter(|i| !scores.contains(i))
            .collect();
        check(edits.iter().all(|&i| base.grad[i] == 0.0), || {
            "evaluator gradient touches edit logits".into()
        })?;
        let mut p = policy.clone();
        for &i in &edits {
            p.theta[i] += r.random_range(-5.0..5.0);
        }
        let moved = grpo_surrogate(&groups, &p).unwrap();
        check(moved.loss == base.loss, || {
            format!("evaluator loss moved {} -> {}", base.loss, moved.loss)
        })?;
    }
    Ok("50 editor and 50 evaluator batches, masked perturbations change nothing".into())
}

fn c5_advantages() -> Outcome {
    let mut r = rng(5);
    let (mut live, mut flat) = (0, 0);
    for _ in 0..2000 {
        let g = r.random_range(2..=8);
        let rewards: Vec<f64> = if r.random_bool(0.2) {
            vec![r.random_range(-3.0..3.0); g]
        } else {
            (0..g).map(|_| r.random_range(-3.0..3.0)).collect()
        };
        let a = group_advantages(&rewards).map_err(|e| e.to_string())?;
        let n = g as f64;
        if rewards.iter().all(|x| *x == rewards[0]) {
            flat += 1;
            check(a.iter().all(|&v| v == 0.0), || {
                format!("flat group gave {a:?}")
            })?;
            continue;
        }
        live += 1;
        let m = a.iter().sum::<f64>() / n;
        let sd = (a.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
        check(m.abs() < 1e-12 && (sd - 1.0).abs() < 1e-9, || {
            format!("mean {m:e}, std {sd}")
        })?;
    }
    Ok(format!("{live} varied and {flat} flat groups"))
}

fn editor_steps(log: &[StepRecord]) -> Vec<&StepRecord> {
    log.iter()
        .filter(|r| r.loop_kind == LoopKind::Editor)
        .collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

struct Trend {
    oracle_first: f64,
    oracle_last: f64,
    gap_first: f64,
    gap_last: f64,
}

fn trend(cfg: &TrainConfig) -> Result<Trend, String> {
    let env = ToyEnvironment::new(&ToyEnvConfig::default(), ActionSpace::default())
        .map_err(|e| e.to_string())?;
    let mut policy = env.initial_policy();
    let out = train(cfg, &env, &mut policy, &mut |_| {}).map_err(|e| e.to_string())?;
    let ed = editor_steps(&out.log);
    let oracle: Vec<f64> = ed.iter().map(|r| r.mean_oracle_score.unwrap()).collect();
    let gap: Vec<f64> = ed
        .iter()
        .map(|r| r.mean_self_score - r.mean_oracle_score.unwrap())
        .collect();
    let (w, q) = (100.min(oracle.len()), gap.len() / 4);
    Ok(Trend {
        oracle_first: mean(oracle[..w].iter().copied()),
        oracle_last: mean(oracle[oracle.len() - w..].iter().copied()),
        gap_first: mean(gap[..q].iter().copied()),
        gap_last: mean(gap[gap.len() - q..].iter().copied()),
    })
}

fn c6_toy_trends() -> Outcome {
    let t = Instant::now();
    let full = trend(&TrainConfig::default())?;
    let no_slm = trend(&TrainConfig {
        slm: false,
        ..TrainConfig::default()
    })?;
    let no_eval = trend(&TrainConfig {
        evaluator_loop: false,
        ..TrainConfig::default()
    })?;
    check(full.oracle_last > full.oracle_first, || {
        format!(
            "(a) full oracle {:.3} -> {:.3}",
            full.oracle_first, full.oracle_last
        )
    })?;
    check(no_slm.gap_last > no_slm.gap_first, || {
        format!(
            "(b) no-slm gap {:.3} -> {:.3}",
            no_slm.gap_first, no_slm.gap_last
        )
    })?;
    check(no_eval.gap_last > no_eval.gap_first, || {
        format!(
            "(c) evaluator-off gap {:.3} -> {:.3}",
            no_eval.gap_first, no_eval.gap_last
        )
    })?;
    check(full.gap_last.abs() <= no_slm.gap_last.abs(), || {
        format!(
            "(d) |gap| full {:.3} vs no-slm {:.3}",
            full.gap_last, no_slm.gap_last
        )
    })?;
    Ok(format!(
        "(a) oracle {:.3}->{:.3} (b) gap {:.3}->{:.3} (c) gap {:.3}->{:.3} (d) {:.3}<={:.3}, {}",
        full.oracle_first,
        full.oracle_last,
        no_slm.gap_first,
        no_slm.gap_last,
        no_eval.gap_first,
        no_eval.gap_last,
        full.gap_last.abs(),
        no_slm.gap_last.abs(),
        within(t, Duration::from_secs(600))?
    ))
}

fn c7_sandbox_determinism() -> Outcome {
    let registry = Registry::builtin();
    let mut r = rng(7);
    let jobs: Vec<(ImageBuffer, Vec<ToolCall>)> = (0..1000)
        .map(|_| {
            let img = random_image(&mut r);
            let calls = (0..r.random_range(1..=6))
                .map(|_| random_call(&mut r, &registry, 0))
                .collect();
            (img, calls)
        })
        .collect();
    let replay = |(img, calls): &(ImageBuffer, Vec<ToolCall>)| {
        let (last, steps) =
            apply_sequence(img, calls, &registry).expect("generated calls are valid");
        let mut hashes: Vec<_> = steps.iter().map(|s| s.content_hash()).collect();
        hashes.push(last.content_hash());
        hashes
    };
    let reference: Vec<_> = jobs.iter().map(replay).collect();
    let workers = 8;
    let concurrent: Vec<Vec<_>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (jobs, replay) = (&jobs, &replay);
                s.spawn(move || {
                    jobs.iter()
                        .skip(w)
                        .step_by(workers)
                        .map(replay)
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for (w, results) in concurrent.iter().enumerate() {
        for (k, hashes) in results.iter().enumerate() {
            let i = w + k * workers;
            check(*hashes == reference[i], || {
                format!("replay {i} diverged on worker {w}")
            })?;
        }
    }

    let names: Vec<String> = registry.names().map(str::to_string).collect();
    check(names.len() == 14, || {
        format!("registry has {} tools", names.len())
    })?;
    for name in &names {
        let spec = registry.get(name).unwrap();
        let mut explicit = ToolCall::new(name.clone());
        for p in &spec.params {
            explicit = match &p.kind {
                ParamKind::Range { default, .. } | ParamKind::Choice { default, .. } => {
                    explicit.with(p.name.clone(), *default)
                }
                ParamKind::Curve { .. } => explicit.with(
                    p.name.clone(),
                    ParamValue::Curve(vec![[0.0, 0.0], [1.0, 1.0]]),
                ),
                ParamKind::Adjustment => explicit,
            };
        }
        for _ in 0..20 {
            let img = random_image(&mut r);
            for call in [&ToolCall::new(name.clone()), &explicit] {
                let out = apply(&img, call, &registry).map_err(|e| format!("{name}: {e}"))?;
                check(out == img, || {
                    format!("{} is not the identity at its defaults", call.render())
                })?;
            }
        }
    }
    Ok(format!(
        "1000 replays on {workers} workers identical; 14 tools identity at defaults"
    ))
}

fn ranks_oracle(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let below = x.iter().filter(|w| *w < v).count() as f64;
            let ties = x.iter().filter(|w| *w == v).count() as f64;
            below + (ties + 1.0) / 2.0
        })
        .collect()
}

fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / n;
    let sx = (x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n).sqrt();
    let sy = (y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n).sqrt();
    cov / (sx * sy)
}

fn c8_metrics() -> Outcome {
    let mut r = rng(8);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let n = r.random_range(3..60);
        let quantise = i % 2 == 0;
        let draw = |r: &mut ChaCha8Rng| {
            let v: f64 = r.random_range(-5.0..5.0);
            if quantise {
                v.round()
            } else {
                v
            }
        };
        let x: Vec<f64> = (0..n).map(|_| draw(&mut r)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| v * r.random_range(-1.0..2.0) + draw(&mut r))
            .collect();
        let (rx, ry) = (ranks_oracle(&x), ranks_oracle(&y));
        if rx.iter().all(|v| *v == rx[0]) || ry.iter().all(|v| *v == ry[0]) {
            continue;
        }
        let s = srcc(&x, &y).map_err(|e| e.to_string())?;
        let p = plcc(&x, &y).map_err(|e| e.to_string())?;
        worst = worst
            .max((s - pearson_oracle(&rx, &ry)).abs())
            .max((p - pearson_oracle(&x, &y)).abs());
    }
    check(worst <= 1e-12, || {
        format!("correlation deviation {worst:e}")
    })?;

    let px = |a: [f64; 3], b: [f64; 3]| {
        pixel_metrics(
            &ImageBuffer::uniform(5, 4, a),
            &ImageBuffer::uniform(5, 4, b),
        )
    };
    for (a, b, want) in [
        ([0.4, 0.1, 0.9], [0.4, 0.1, 0.9], (0.0, 0.0)),
        ([0.0; 3], [1.0; 3], (100.0, 1000.0)),
        ([0.3; 3], [0.5; 3], (20.0, 40.0)),
    ] {
        let m = px(a, b).map_err(|e| e.to_string())?;
        check((m.l1_scaled, m.l2_scaled) == want, || {
            format!("{a:?} vs {b:?}: {m:?}, want {want:?}")
        })?;
    }

    for _ in 0..10_000 {
        let (sc, pq) = (r.random_range(0.0..=10.0), r.random_range(0.0..=10.0));
        let o = JudgeScores::new(sc, pq).map_err(|e| e.to_string())?.o;
        check(
            sc.min(pq) <= o && o <= sc.max(pq) && o <= (sc + pq) / 2.0,
            || format!("o({sc}, {pq}) = {o}"),
        )?;
    }
    Ok(format!(
        "100 vectors, max deviation {worst:.1e}; 3 pixel examples exact; 10k o bounds"
    ))
}

fn c9_pipeline() -> Outcome {
    let store = Arc::new(MemoryStore::new());
    let registry = Arc::new(Registry::builtin());
    let sandbox = Sandbox::new(registry.clone(), store.clone());
    let mut r = rng(9);
    let mut reflections = Vec::new();
    let mut kinds = [0usize; 3];
    for i in 0..1000 {
        let t: AnyTrajectory = match i % 3 {
            0 => random_trajectory(&mut r, &store, &registry).into(),
            1 => random_trajectory(&mut r, &store, &registry)
                .to_eval()
                .into(),
            _ => loop {
                let img = random_image(&mut r);
                let source = store.put(&img).unwrap();
                let members = (0..3)
                    .map(|_| random_history(&mut r, &store, &registry, &source, &img, "q"))
                    .collect();
                let group = CandidateGroup {
                    source,
                    query: "q".into(),
                    members,
                };
                if let Some(pair) = detect_pairs(&group).first() {
                    let t = build_reflection_trajectory(
                        &group,
                        pair,
                        "winner kept the highlights",
                        &sandbox,
                    )
                    .map_err(|e| e.to_string())?;
                    reflections.push(t.clone());
                    break t.into();
                }
            },
        };
        kinds[i % 3] += 1;
        let line = serialize(&t);
        let back = parse(&line).map_err(|e| format!("trajectory {i}: {e}"))?;
        check(back == t && serialize(&back) == line, || {
            format!("trajectory {i} did not round-trip")
        })?;
    }

    // reflections mined from a training run, exported and read back
    let env = toy_env();
    let mut policy = env.initial_policy();
    let cfg = TrainConfig {
        steps: 30,
        ..TrainConfig::default()
    };
    let out = train(&cfg, &env, &mut policy, &mut |_| {}).map_err(|e| e.to_string())?;
    let mined = reflect_groups(
        &out.candidates,
        &ScriptedRationale::new(vec!["smaller steps".into()]),
        &env.sandbox,
        4,
    )
    .map_err(|e| e.to_string())?;
    let mut buf = Vec::new();
    export_sft(&mined, &mut buf).map_err(|e| e.to_string())?;
    let exported = parse_jsonl(BufReader::new(&buf[..])).map_err(|e| e.to_string())?;
    let mut replayed = 0;
    for t in exported.iter().chain(
        &reflections
            .into_iter()
            .map(AnyTrajectory::from)
            .collect::<Vec<_>>(),
    ) {
        let AnyTrajectory::Reflection(t) = t else {
            return Err("export produced a non-reflection record".into());
        };
        let src = env
            .sandbox
            .store
            .get(t.source())
            .or_else(|_| store.get(t.source()))
            .map_err(|e| e.to_string())?;
        check(t.replay_target(&src, &sandbox.registry), || {
            "corrective replay missed the target hash".into()
        })?;
        replayed += 1;
    }

    // staged data generation: a rerun makes no client calls
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut entries = Vec::new();
    for k in 0..3 {
        let path = dir.path().join(format!("s{k}.png"));
        write_png(&path, &random_image(&mut r).quantized()).map_err(|e| e.to_string())?;
        let tools = (0..=k)
            .map(|_| random_call(&mut r, &registry, 1).render())
            .collect();
        entries.push(SourceEntry {
            id: format!("s{k}"),
            source: path,
            tools,
        });
    }
    let annotator = ScriptedAnnotator::new()
        .reply(Stage::Instructions, "brighten the subject")
        .reply(Stage::Imcot, "this call moves toward the target")
        .reply(
            Stage::EvalAnnotation,
            "<think>close to the request</think><answer>score: 4</answer>",
        )
        .reply(
            Stage::Filtering,
            r#"{"adherence": 8, "aesthetics": 8, "consistency": 8, "notes": ""}"#,
        );
    let pipeline = Pipeline::new(&sandbox, &annotator);
    let mut batch: Vec<Record> =
        records_from_sources(&entries, dir.path(), &sandbox).map_err(|e| e.to_string())?;
    for stage in Stage::ALL {
        batch = pipeline
            .run_stage(stage, batch)
            .map_err(|e| e.to_string())?;
    }
    let calls = annotator.calls();
    let mut again = batch.clone();
    for stage in Stage::ALL {
        let out = dir.path().join(format!("{}.jsonl", stage.as_str()));
        let report = pipeline
            .run_stage_resumable(stage, again.clone(), &out)
            .map_err(|e| e.to_string())?;
        again = report.records;
    }
    check(annotator.calls() == calls && again == batch, || {
        format!("rerun made {} client calls", annotator.calls() - calls)
    })?;
    Ok(format!(
        "{} edit, {} eval, {} reflection records round-trip; {replayed} reflection replays hit target; rerun 0 client calls",
        kinds[0], kinds[1], kinds[2]
    ))
}

fn c10_end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let images = dir.path().join("images");
    let store: Arc<dyn ImageStore> = Arc::new(DirStore::new(&images).map_err(|e| e.to_string())?);
    let registry = Arc::new(Registry::builtin());
    let sandbox = Sandbox::new(registry.clone(), store.clone());
    let turn = |s: &str| RawModelOutput::new(s);
    let script = Script {
        rollouts: vec![vec![
            turn("<think>underexposed</think><tool_call>{exposure, ev: 0.7}</tool_call>"),
            turn("<think>lift the shadows</think><tool_call>{shadows, s: 25}</tool_call>"),
            turn("<think>warm it</think><tool_call>{temperature, t: 12}</tool_call><tool_call>{tint, t: -5}</tool_call>"),
            turn("<think>vignette</think><tool_call>{radial_mask, feather: 0.4, adjustment: {exposure, ev: -0.3}}</tool_call>"),
            turn("<think>matches the request</think><answer>bright and warm. score: 4</answer>"),
        ]],
        evaluator: vec![],
    };
    let src = ImageBuffer::from_fn(16, 12, |x, y| {
        [0.1 + 0.02 * x as f64, 0.15 + 0.03 * y as f64, 0.3]
    });
    let src_ref = store.put(&src).map_err(|e| e.to_string())?;
    let ep = run_episode(
        &ScriptedBackend::new(script),
        &sandbox,
        EpisodeSpec {
            source: &src_ref,
            source_image: &src,
            query: "brighten and warm",
            max_rounds: 4,
            member: 0,
            seed: 0,
        },
    )
    .map_err(|e| e.to_string())?;
    let traj = ep.trajectory;
    check(traj.rounds().len() == 4 && traj.format_ok(), || {
        format!("{} rounds", traj.rounds().len())
    })?;
    let line = serialize(&AnyTrajectory::Edit(traj.clone()));
    let AnyTrajectory::Edit(back) = parse(&line).map_err(|e| e.to_string())? else {
        return Err("record changed kind".into());
    };
    // a fresh store only sees what was written to disk
    let fresh = DirStore::new(&images).map_err(|e| e.to_string())?;
    let mut current = src.clone();
    for (i, round) in back.rounds().iter().enumerate() {
        current = apply_sequence(&current, &round.tools.calls, &registry)
            .map_err(|e| e.to_string())?
            .0;
        let stored = fresh
            .get(&round.observation)
            .map_err(|e| format!("round {i}: {e}"))?;
        check(*stored == current, || {
            format!("round {i} observation differs from replay")
        })?;
    }

    let run = || -> Result<(String, usize), String> {
        let env = toy_env();
        let mut policy = env.initial_policy();
        let cfg = TrainConfig {
            steps: 60,
            seed: 11,
            reward_mode: RewardMode::Pairwise,
            ..TrainConfig::default()
        };
        let out = train(&cfg, &env, &mut policy, &mut |_| {}).map_err(|e| e.to_string())?;
        let log: String = out
            .log
            .iter()
            .map(|r| serde_json::to_string(r).unwrap() + "\n")
            .collect();
        Ok((log, out.candidates.len()))
    };
    let (a, b) = (run()?, run()?);
    check(a == b, || "two seeded training runs differ".into())?;
    Ok(format!(
        "4-round episode replays bit-exactly from disk; seeded training log identical ({} bytes)",
        a.0.len()
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("reward oracle suite", c1_reward_oracles),
        ("score-alignment kernel", c2_score_alignment),
        ("surrogate gradient check", c3_gradient_check),
        ("loss-mask soundness", c4_slm_soundness),
        ("advantage normalization", c5_advantages),
        ("toy training trends", c6_toy_trends),
        ("sandbox determinism", c7_sandbox_determinism),
        ("metrics oracles", c8_metrics),
        ("pipeline integrity", c9_pipeline),
        ("end-to-end smoke", c10_end_to_end),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|a| *a == id || name.contains(a.as_str())) {
            continue;
        }
        match f() {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
