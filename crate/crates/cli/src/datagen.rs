use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use clap::Args;
use sepolab::datagen::{
    load_reviews, read_jsonl, records_from_sources, AnnotationRequest, Annotator, DatagenError,
    Pipeline, Record, RemoteAnnotator, ScriptedAnnotator, SourceEntry, Stage,
};

use crate::common::{self, ClientSpec, RunConfig, BACKEND_ENV};
use crate::error::{CliError, CliResult};

/// `all` or one stage name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSel {
    All,
    One(Stage),
}

impl std::str::FromStr for StageSel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "all" {
            Ok(StageSel::All)
        } else {
            s.parse::<Stage>()
                .map(StageSel::One)
                .map_err(|e| e.to_string())
        }
    }
}

#[derive(Debug, Args)]
pub struct DatagenRun {
    /// Source entries JSONL: `{"id", "source", "tools"?}` per line.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "all")]
    pub stage: StageSel,
    /// `scripted:FILE` (JSON with `by_stage` / `by_key` replies) or `remote`.
    #[arg(long)]
    pub annotator: ClientSpec,
    /// Manual reviewer verdicts JSONL for the filtering stage.
    #[arg(long)]
    pub reviews: Option<PathBuf>,
    #[arg(long)]
    pub registry: Option<PathBuf>,
}

/// Counts calls flowing to the wrapped annotator.
struct Counted<'a> {
    inner: &'a dyn Annotator,
    calls: AtomicUsize,
}

impl Annotator for Counted<'_> {
    fn annotate(&self, req: &AnnotationRequest) -> Result<String, DatagenError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.annotate(req)
    }

    fn name(&self) -> String {
        self.inner.name()
    }
}

fn classify(e: DatagenError) -> CliError {
    match e {
        DatagenError::Schema { .. } => CliError::usage("schema", e),
        DatagenError::ClientUnavailable(_) => CliError::runtime("client", e),
        other => CliError::runtime("datagen", other),
    }
}

fn stage_file(out: &Path, stage: Stage) -> PathBuf {
    out.join(format!("{}.jsonl", stage.as_str()))
}

pub fn run(cmd: DatagenRun, seed: u64) -> CliResult<()> {
    common::require_file(&cmd.input, "input")?;
    let registry = common::load_registry(cmd.registry.as_deref())?;
    let reviews = match &cmd.reviews {
        Some(path) => {
            common::require_file(path, "reviews")?;
            load_reviews(path).map_err(classify)?
        }
        None => Default::default(),
    };
    let stages: Vec<Stage> = match cmd.stage {
        StageSel::All => Stage::ALL.to_vec(),
        StageSel::One(s) => vec![s],
    };
    if let Some(prev) = stages[0].previous() {
        let upstream = stage_file(&cmd.out, prev);
        if !upstream.is_file() {
            return Err(CliError::usage(
                "not_found",
                format!(
                    "stage {} needs {} from an earlier run",
                    stages[0].as_str(),
                    upstream.display()
                ),
            ));
        }
    }
    common::create_out(&cmd.out)?;
    let sandbox = common::sandbox(&cmd.out, registry)?;
    let inner: Box<dyn Annotator> = match &cmd.annotator {
        ClientSpec::Scripted(path) => Box::new(common::read_json::<ScriptedAnnotator>(
            path,
            "annotator script",
        )?),
        ClientSpec::Remote => Box::new(RemoteAnnotator::new(
            common::wire_client(BACKEND_ENV)?,
            "remote",
        )),
    };
    let annotator = Counted {
        inner: inner.as_ref(),
        calls: AtomicUsize::new(0),
    };
    let mut inputs = vec![("input".to_string(), cmd.input.clone())];
    if let Some(r) = &cmd.reviews {
        inputs.push(("reviews".into(), r.clone()));
    }
    RunConfig {
        command: Some("datagen run".into()),
        seed: Some(seed),
        out: Some(cmd.out.clone()),
        registry: cmd.registry.clone(),
        backend: Some(cmd.annotator.to_string()),
        inputs: inputs.into_iter().collect(),
        options: [(
            "stage".to_string(),
            match cmd.stage {
                StageSel::All => "all".to_string(),
                StageSel::One(s) => s.as_str().to_string(),
            },
        )]
        .into(),
        ..RunConfig::default()
    }
    .echo(&cmd.out)?;

    let mut pipeline = Pipeline::new(&sandbox, &annotator);
    pipeline.reviews = reviews;
    let mut batch: Vec<Record> = match stages[0].previous() {
        None => {
            let entries: Vec<SourceEntry> = read_jsonl(&cmd.input, false).map_err(classify)?;
            let base = cmd.input.parent().unwrap_or(Path::new("."));
            records_from_sources(&entries, base, &sandbox).map_err(classify)?
        }
        Some(prev) => read_jsonl(&stage_file(&cmd.out, prev), false).map_err(classify)?,
    };
    for stage in stages {
        let before = annotator.calls.load(Ordering::SeqCst);
        let report = pipeline
            .run_stage_resumable(stage, batch, &stage_file(&cmd.out, stage))
            .map_err(classify)?;
        let calls = annotator.calls.load(Ordering::SeqCst) - before;
        println!(
            "{}",
            serde_json::json!({
                "stage": stage.as_str(),
                "records": report.records.len(),
                "processed": report.processed,
                "skipped": report.skipped,
                "client_calls": calls,
            })
        );
        batch = report.records;
    }
    Ok(())
}
