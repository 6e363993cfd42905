use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use sepolab::metrics::{
    bench_eval, bench_run, load_eval_manifest, load_manifest, preference_rates, BenchConfig,
    BenchRow, JudgeClient, MetricsError, Outcome, RemoteJudge, ScriptedJudge,
};
use serde::Deserialize;

use crate::common::{self, ClientSpec, RunConfig, JUDGE_ENV};
use crate::error::{CliError, CliResult};

#[derive(Debug, Subcommand)]
pub enum BenchCmd {
    /// Editing benchmark: pixel metrics against references, optional judge scores.
    Edit(BenchEdit),
    /// Evaluation benchmark: predicted scores against human scores.
    Eval(BenchEval),
}

#[derive(Debug, Args)]
pub struct BenchEdit {
    /// JSONL manifest of `{"id", "source", "reference", "instruction", "lang"}`.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub backend: ClientSpec,
    /// `scripted:FILE` (JSON with `by_hash` / `fallback` replies) or `remote`.
    #[arg(long)]
    pub judge: Option<ClientSpec>,
    #[arg(long, default_value_t = 4)]
    pub max_rounds: u32,
    #[arg(long, default_value_t = 4)]
    pub judge_in_flight: usize,
    #[arg(long)]
    pub registry: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchEval {
    /// JSONL manifest of `{"id", "source", "edited", "instruction", "lang", "score"}`.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub backend: ClientSpec,
    #[arg(long)]
    pub registry: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JudgeScript {
    #[serde(default)]
    by_hash: BTreeMap<String, String>,
    #[serde(default)]
    fallback: Option<String>,
}

fn classify(e: MetricsError) -> CliError {
    match e {
        MetricsError::Schema { .. } => CliError::usage("schema", e),
        MetricsError::ClientUnavailable(_) => CliError::runtime("client", e),
        other => CliError::runtime("metrics", other),
    }
}

fn judge(
    spec: &ClientSpec,
    store: std::sync::Arc<dyn sepolab::toolbox::ImageStore>,
) -> CliResult<Box<dyn JudgeClient>> {
    Ok(match spec {
        ClientSpec::Scripted(path) => {
            let s: JudgeScript = common::read_json(path, "judge script")?;
            Box::new(ScriptedJudge {
                by_hash: s.by_hash,
                fallback: s.fallback,
            })
        }
        ClientSpec::Remote => Box::new(RemoteJudge::new(common::wire_client(JUDGE_ENV)?, store)),
    })
}

pub fn run(cmd: BenchCmd, seed: u64) -> CliResult<()> {
    match cmd {
        BenchCmd::Edit(c) => edit(c, seed),
        BenchCmd::Eval(c) => eval(c, seed),
    }
}

/// Effective-config echo shared by both bench commands; callers add judge and options.
fn echo_base(
    command: &str,
    out: &Path,
    seed: u64,
    registry: &Option<PathBuf>,
    backend: &ClientSpec,
    manifest: &Path,
) -> RunConfig {
    RunConfig {
        command: Some(command.into()),
        seed: Some(seed),
        out: Some(out.to_path_buf()),
        registry: registry.clone(),
        backend: Some(backend.to_string()),
        inputs: [("manifest".to_string(), manifest.to_path_buf())].into(),
        ..RunConfig::default()
    }
}

fn edit(cmd: BenchEdit, seed: u64) -> CliResult<()> {
    common::require_file(&cmd.manifest, "manifest")?;
    let samples = load_manifest(&cmd.manifest).map_err(classify)?;
    let registry = common::load_registry(cmd.registry.as_deref())?;
    common::create_out(&cmd.out)?;
    let sandbox = common::sandbox(&cmd.out, registry)?;
    let backend = common::backend(&cmd.backend, sandbox.store.clone())?;
    let judge = cmd
        .judge
        .as_ref()
        .map(|j| judge(j, sandbox.store.clone()))
        .transpose()?;
    RunConfig {
        judge: cmd.judge.as_ref().map(|j| j.to_string()),
        options: [
            ("max_rounds".to_string(), cmd.max_rounds.to_string()),
            (
                "judge_in_flight".to_string(),
                cmd.judge_in_flight.to_string(),
            ),
        ]
        .into(),
        ..echo_base(
            "bench edit",
            &cmd.out,
            seed,
            &cmd.registry,
            &cmd.backend,
            &cmd.manifest,
        )
    }
    .echo(&cmd.out)?;
    let cfg = BenchConfig {
        max_rounds: cmd.max_rounds,
        seed,
        judge_in_flight: cmd.judge_in_flight,
    };
    let report =
        bench_run(&samples, &sandbox, backend.as_ref(), judge.as_deref(), cfg).map_err(classify)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv).map_err(classify)?;
    common::write_file(&cmd.out.join("bench.csv"), &csv)?;
    common::write_file(&cmd.out.join("bench.svg"), report.svg().as_bytes())?;
    let summary = report.summary();
    common::write_file(&cmd.out.join("summary.txt"), summary.as_bytes())?;
    print!("{summary}");
    Ok(())
}

fn eval(cmd: BenchEval, seed: u64) -> CliResult<()> {
    common::require_file(&cmd.manifest, "manifest")?;
    let samples = load_eval_manifest(&cmd.manifest).map_err(classify)?;
    let registry = common::load_registry(cmd.registry.as_deref())?;
    common::create_out(&cmd.out)?;
    let sandbox = common::sandbox(&cmd.out, registry)?;
    let backend = common::backend(&cmd.backend, sandbox.store.clone())?;
    echo_base(
        "bench eval",
        &cmd.out,
        seed,
        &cmd.registry,
        &cmd.backend,
        &cmd.manifest,
    )
    .echo(&cmd.out)?;
    let report = bench_eval(&samples, &sandbox, backend.as_ref(), seed).map_err(classify)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv).map_err(classify)?;
    common::write_file(&cmd.out.join("eval.csv"), &csv)?;
    common::write_file(&cmd.out.join("eval.svg"), report.svg().as_bytes())?;
    let summary = report.summary();
    common::write_file(&cmd.out.join("summary.txt"), summary.as_bytes())?;
    print!("{summary}");
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    L1,
    L2,
    Sc,
    Pq,
    O,
    SelfScore,
}

impl Metric {
    fn value(self, r: &BenchRow) -> Option<f64> {
        match self {
            Metric::L1 => Some(r.l1),
            Metric::L2 => Some(r.l2),
            Metric::Sc => r.sc,
            Metric::Pq => r.pq,
            Metric::O => r.o,
            Metric::SelfScore => Some(r.self_score),
        }
    }

    fn lower_is_better(self) -> bool {
        matches!(self, Metric::L1 | Metric::L2)
    }
}

#[derive(Debug, Args)]
pub struct MetricsCompare {
    /// Bench CSV of the system under test.
    #[arg(long)]
    pub ours: PathBuf,
    /// Bench CSV of the baseline.
    #[arg(long)]
    pub theirs: PathBuf,
    #[arg(long, value_enum)]
    pub metric: Metric,
    /// Differences at or below this magnitude count as ties.
    #[arg(long, default_value_t = 0.0)]
    pub tie_tolerance: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Per-sample rows of a bench CSV; aggregate rows are dropped.
fn read_rows(path: &Path) -> CliResult<BTreeMap<String, BenchRow>> {
    common::require_file(path, "bench csv")?;
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CliError::usage("schema", format!("{}: {e}", path.display())))?;
    let mut rows = BTreeMap::new();
    for (i, r) in reader.deserialize::<BenchRow>().enumerate() {
        let r =
            r.map_err(|e| CliError::usage("schema", format!("{}:{}: {e}", path.display(), i + 2)))?;
        if r.id == "mean" || r.id.starts_with("mean_") {
            continue;
        }
        if rows.insert(r.id.clone(), r).is_some() {
            return Err(CliError::usage(
                "schema",
                format!("{}: duplicate id", path.display()),
            ));
        }
    }
    Ok(rows)
}

pub fn compare(cmd: MetricsCompare) -> CliResult<()> {
    if !(cmd.tie_tolerance.is_finite() && cmd.tie_tolerance >= 0.0) {
        return Err(CliError::usage(
            "config",
            "--tie-tolerance must be a non-negative number",
        ));
    }
    let ours = read_rows(&cmd.ours)?;
    let theirs = read_rows(&cmd.theirs)?;
    if !ours.keys().eq(theirs.keys()) {
        return Err(CliError::usage(
            "schema",
            "the two bench files cover different sample ids",
        ));
    }
    let mut outcomes = Vec::with_capacity(ours.len());
    for (id, a) in &ours {
        let (Some(x), Some(y)) = (cmd.metric.value(a), cmd.metric.value(&theirs[id])) else {
            return Err(CliError::usage(
                "schema",
                format!("sample {id} lacks the {:?} column", cmd.metric),
            ));
        };
        let diff = if cmd.metric.lower_is_better() {
            y - x
        } else {
            x - y
        };
        outcomes.push(if diff.abs() <= cmd.tie_tolerance {
            Outcome::Tie
        } else if diff > 0.0 {
            Outcome::Win
        } else {
            Outcome::Loss
        });
    }
    let rates = preference_rates(&outcomes).map_err(|e| CliError::usage("schema", e))?;
    common::create_out(&cmd.out)?;
    RunConfig {
        command: Some("metrics compare".into()),
        out: Some(cmd.out.clone()),
        inputs: [
            ("ours".to_string(), cmd.ours.clone()),
            ("theirs".to_string(), cmd.theirs.clone()),
        ]
        .into(),
        options: [
            (
                "metric".to_string(),
                format!("{:?}", cmd.metric).to_lowercase(),
            ),
            ("tie_tolerance".to_string(), cmd.tie_tolerance.to_string()),
        ]
        .into(),
        ..RunConfig::default()
    }
    .echo(&cmd.out)?;
    let report = serde_json::json!({
        "samples": outcomes.len(),
        "win_rate": rates.win_rate,
        "positive_rate": rates.positive_rate,
    });
    common::write_file(
        &cmd.out.join("compare.json"),
        format!("{report:#}\n").as_bytes(),
    )?;
    println!("{report}");
    Ok(())
}
