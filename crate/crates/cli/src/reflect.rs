use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use clap::Args;
use sepolab::reflection::{
    export_sft, read_candidates, reflect_groups, RationaleClient, ReflectionError, RemoteRationale,
    ScriptedRationale,
};

use crate::common::{self, ClientSpec, RunConfig, BACKEND_ENV};
use crate::error::{CliError, CliResult};

#[derive(Debug, Args)]
pub struct ReflectExport {
    /// Candidate groups JSONL written by `sepo train`.
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `scripted:FILE` (a JSON array of rationale texts) or `remote`.
    #[arg(long)]
    pub rationale: ClientSpec,
    #[arg(long)]
    pub registry: Option<PathBuf>,
    /// Concurrent rationale requests.
    #[arg(long, default_value_t = 4)]
    pub in_flight: usize,
}

fn classify(e: ReflectionError) -> CliError {
    match e {
        ReflectionError::BadCandidate { .. } => CliError::usage("schema", e),
        ReflectionError::EmptyDataset => CliError::runtime("empty_dataset", e),
        other => CliError::runtime("reflection", other),
    }
}

pub fn run(cmd: ReflectExport, seed: u64) -> CliResult<()> {
    common::require_file(&cmd.candidates, "candidates")?;
    let registry = common::load_registry(cmd.registry.as_deref())?;
    common::create_out(&cmd.out)?;
    let sandbox = common::sandbox(&cmd.out, registry)?;
    let client: Box<dyn RationaleClient> = match &cmd.rationale {
        ClientSpec::Scripted(path) => Box::new(ScriptedRationale::new(common::read_json(
            path,
            "rationale script",
        )?)),
        ClientSpec::Remote => Box::new(RemoteRationale::new(
            common::wire_client(BACKEND_ENV)?,
            sandbox.store.clone(),
        )),
    };
    RunConfig {
        command: Some("reflect export".into()),
        seed: Some(seed),
        out: Some(cmd.out.clone()),
        registry: cmd.registry.clone(),
        backend: Some(cmd.rationale.to_string()),
        inputs: [("candidates".to_string(), cmd.candidates.clone())].into(),
        options: [("in_flight".to_string(), cmd.in_flight.to_string())].into(),
        ..RunConfig::default()
    }
    .echo(&cmd.out)?;

    let file = File::open(&cmd.candidates).map_err(|e| CliError::io(&cmd.candidates, e))?;
    let groups = read_candidates(BufReader::new(file)).map_err(classify)?;
    let trajs =
        reflect_groups(&groups, client.as_ref(), &sandbox, cmd.in_flight).map_err(classify)?;
    let mut buf = Vec::new();
    let n = export_sft(&trajs, &mut buf).map_err(classify)?;
    common::write_file(&cmd.out.join("sft.jsonl"), &buf)?;
    println!(
        "{}",
        serde_json::json!({ "groups": groups.len(), "exported": n })
    );
    Ok(())
}
