use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, ValueEnum};
use sepolab::plot::{line_chart, Series};
use sepolab::policy::toy::ActionSpace;
use sepolab::reflection::write_candidates;
use sepolab::sepo::{train, LoopKind, RewardMode, SepoError, StepRecord, ToyEnvironment};
use serde::Serialize;

use crate::common::{self, RunConfig};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    NoSlm,
    NoEvaluator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Pairwise,
    Absolute,
    External,
}

impl From<Mode> for RewardMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Pairwise => RewardMode::Pairwise,
            Mode::Absolute => RewardMode::Absolute,
            Mode::External => RewardMode::External,
        }
    }
}

/// Source of external self-score supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Judge {
    /// The toy environment's fixed, biased judge.
    Scripted,
}

#[derive(Debug, Args)]
pub struct SepoTrain {
    /// TOML file with `[train]` and `[toy]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides the config file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub ablation: Vec<Ablation>,
    #[arg(long, value_enum)]
    pub reward_mode: Option<Mode>,
    #[arg(long, value_enum)]
    pub judge: Option<Judge>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Serialize)]
struct SummaryRow {
    step: usize,
    loop_kind: LoopKind,
    loss: f64,
    tokens: usize,
    mean_self_score: f64,
    mean_oracle_score: Option<f64>,
    mean_pairwise_preference: Option<f64>,
    mean_score_alignment: Option<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Mean score-alignment reward of a step, whether it came from the
/// evaluator loop or from external judge supervision.
fn score_alignment(r: &StepRecord) -> Option<f64> {
    mean(r.groups.iter().flat_map(|g| &g.members).filter_map(|m| {
        m.reward
            .score_alignment
            .or_else(|| m.judge.as_ref().and_then(|j| j.reward.score_alignment))
    }))
}

fn variant_label(cfg: &sepolab::sepo::TrainConfig) -> String {
    let mut parts = vec![format!("slm={}", if cfg.slm { "on" } else { "off" })];
    if !cfg.evaluator_loop {
        parts.push("evaluator=off".into());
    }
    match cfg.reward_mode {
        RewardMode::Pairwise => {}
        RewardMode::Absolute => parts.push("reward=absolute".into()),
        RewardMode::External => parts.push("reward=external".into()),
    }
    parts.join(" ")
}

fn resolve(cmd: &SepoTrain, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = match &cmd.config {
        Some(path) => {
            common::require_file(path, "config")?;
            RunConfig::load(path)?
        }
        None => RunConfig::default(),
    };
    for (field, set) in [
        ("registry", cfg.registry.is_some()),
        ("backend", cfg.backend.is_some()),
        ("inputs", !cfg.inputs.is_empty()),
        ("options", !cfg.options.is_empty()),
    ] {
        if set {
            return Err(CliError::usage(
                "config",
                format!("`{field}` is not used by sepo train"),
            ));
        }
    }
    let mut train = cfg.train.take().unwrap_or_default();
    if let Some(s) = seed.or(cfg.seed) {
        train.seed = s;
    }
    if let Some(steps) = cmd.steps {
        train.steps = steps;
    }
    for a in &cmd.ablation {
        match a {
            Ablation::NoSlm => train.slm = false,
            Ablation::NoEvaluator => train.evaluator_loop = false,
        }
    }
    if let Some(m) = cmd.reward_mode {
        train.reward_mode = m.into();
    }
    let judge = cmd
        .judge
        .map(|_| "scripted".to_string())
        .or(cfg.judge.take());
    match (train.reward_mode, judge.as_deref()) {
        (RewardMode::External, None) => {
            return Err(CliError::usage(
                "config",
                "reward mode `external` needs a judge (--judge scripted)",
            ))
        }
        (_, Some(j)) if j != "scripted" => {
            return Err(CliError::usage(
                "config",
                format!("unknown judge `{j}`; only `scripted` is available"),
            ))
        }
        _ => {}
    }
    train.validate().map_err(|e| CliError::usage("config", e))?;
    let out =
        cmd.out.clone().or(cfg.out.take()).ok_or_else(|| {
            CliError::usage("config", "no output directory; pass --out or set `out`")
        })?;
    Ok(RunConfig {
        command: Some("sepo train".into()),
        seed: Some(train.seed),
        out: Some(out),
        judge,
        train: Some(train),
        toy: Some(cfg.toy.take().unwrap_or_default()),
        ..RunConfig::default()
    })
}

fn write_summary(path: &Path, log: &[StepRecord]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    for r in log {
        w.serialize(SummaryRow {
            step: r.step,
            loop_kind: r.loop_kind,
            loss: r.loss,
            tokens: r.tokens,
            mean_self_score: r.mean_self_score,
            mean_oracle_score: r.mean_oracle_score,
            mean_pairwise_preference: r.mean_pairwise_preference,
            mean_score_alignment: score_alignment(r),
        })
        .map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn write_plots(out: &Path, label: &str, log: &[StepRecord]) -> CliResult<()> {
    let editor: Vec<&StepRecord> = log
        .iter()
        .filter(|r| r.loop_kind == LoopKind::Editor)
        .collect();
    let points = |f: &dyn Fn(&StepRecord) -> Option<f64>| -> Vec<(f64, f64)> {
        editor
            .iter()
            .filter_map(|r| f(r).map(|v| (r.step as f64, v)))
            .collect()
    };
    let self_score = line_chart(
        "self-evaluation score",
        "step",
        "mean score",
        &[
            Series::new(label, points(&|r| Some(r.mean_self_score))),
            Series::new("oracle", points(&|r| r.mean_oracle_score)),
        ],
    );
    common::write_file(&out.join("self_score.svg"), self_score.as_bytes())?;
    let preference = line_chart(
        "pairwise preference reward",
        "step",
        "mean reward",
        &[Series::new(label, points(&|r| r.mean_pairwise_preference))],
    );
    common::write_file(&out.join("pairwise_preference.svg"), preference.as_bytes())
}

pub fn run(cmd: SepoTrain, seed: Option<u64>) -> CliResult<()> {
    let run_cfg = resolve(&cmd, seed)?;
    let (Some(out), Some(cfg), Some(toy)) = (&run_cfg.out, &run_cfg.train, &run_cfg.toy) else {
        unreachable!("resolve fills out, train and toy");
    };
    common::create_out(out)?;
    let store = common::image_store(out)?;
    let env = ToyEnvironment::with_store(toy, ActionSpace::default(), store)
        .map_err(|e| CliError::usage("config", e))?;
    run_cfg.echo(out)?;

    let log_path = out.join("log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?);
    let mut write_err = None;
    let mut policy = env.initial_policy();
    let started = Instant::now();
    let result = train(cfg, &env, &mut policy, &mut |r| {
        if write_err.is_none() {
            let line = serde_json::to_string(r).expect("step records serialize");
            if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
                write_err = Some(e);
            }
        }
    });
    let wall = started.elapsed().as_secs_f64();
    if let Some(e) = write_err {
        return Err(CliError::io(&log_path, e));
    }
    let output = result.map_err(|e| match e {
        SepoError::Config(_) => CliError::usage("config", e),
        other => CliError::runtime("train", other),
    })?;

    write_summary(&out.join("summary.csv"), &output.log)?;
    let label = variant_label(cfg);
    write_plots(out, &label, &output.log)?;
    let cand_path = out.join("candidates.jsonl");
    let cand = BufWriter::new(File::create(&cand_path).map_err(|e| CliError::io(&cand_path, e))?);
    let n_candidates =
        write_candidates(cand, &output.candidates).map_err(|e| CliError::io(&cand_path, e))?;
    let timing = serde_json::json!({ "wall_seconds": wall, "steps": output.log.len() });
    common::write_file(&out.join("timing.json"), format!("{timing}\n").as_bytes())?;

    let last = output
        .log
        .iter()
        .rev()
        .find(|r| r.loop_kind == LoopKind::Editor);
    let summary = serde_json::json!({
        "variant": label,
        "steps": output.log.len(),
        "candidates": n_candidates,
        "final_self_score": last.map(|r| r.mean_self_score),
        "final_oracle_score": last.and_then(|r| r.mean_oracle_score),
    });
    println!("{summary}");
    Ok(())
}
