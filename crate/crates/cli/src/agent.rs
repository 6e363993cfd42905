use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use sepolab::agent::{run_episode, Episode, EpisodeSpec};
use sepolab::toolbox::{read_png, write_png};
use sepolab::trajectory::{serialize, AnyTrajectory};

use crate::common::{self, ClientSpec, RunConfig};
use crate::error::{CliError, CliResult};

#[derive(Debug, Args)]
pub struct AgentRun {
    /// Source PNG.
    #[arg(long)]
    pub source: PathBuf,
    /// Editing request.
    #[arg(long)]
    pub query: String,
    #[arg(long)]
    pub out: PathBuf,
    /// `scripted:FILE` or `remote`.
    #[arg(long)]
    pub backend: ClientSpec,
    #[arg(long, default_value_t = 4)]
    pub max_rounds: u32,
    /// Tool registry TOML; the builtin registry when absent.
    #[arg(long)]
    pub registry: Option<PathBuf>,
}

fn step_log(ep: &Episode) -> String {
    let mut s = String::new();
    for (i, turn) in ep.turns.iter().enumerate() {
        let status = if turn.format_ok { "ok" } else { "malformed" };
        let _ = writeln!(s, "turn {i} [{:?}] {status}", turn.mode);
        for line in turn.output.text.lines() {
            let _ = writeln!(s, "    {line}");
        }
    }
    let t = &ep.trajectory;
    for (i, round) in t.rounds().iter().enumerate() {
        let calls: Vec<String> = round.tools.calls.iter().map(|c| c.render()).collect();
        let _ = writeln!(
            s,
            "round {}: {} -> {}",
            i + 1,
            calls.join(" "),
            round.observation.hash.to_hex()
        );
    }
    let _ = writeln!(
        s,
        "self-evaluation: score {} ({})",
        t.self_eval().score(),
        t.self_eval().eval.rationale()
    );
    s
}

pub fn run(cmd: AgentRun, seed: u64) -> CliResult<()> {
    if !cmd.source.is_file() {
        return Err(CliError::usage(
            "not_found",
            format!("source not found: {}", cmd.source.display()),
        ));
    }
    if cmd.max_rounds == 0 {
        return Err(CliError::usage("config", "--max-rounds must be at least 1"));
    }
    let registry = common::load_registry(cmd.registry.as_deref())?;
    common::create_out(&cmd.out)?;
    let sandbox = common::sandbox(&cmd.out, registry)?;
    let backend = common::backend(&cmd.backend, sandbox.store.clone())?;
    RunConfig {
        command: Some("agent run".into()),
        seed: Some(seed),
        out: Some(cmd.out.clone()),
        registry: cmd.registry.clone(),
        backend: Some(cmd.backend.to_string()),
        inputs: [("source".to_string(), cmd.source.clone())].into(),
        options: [
            ("query".to_string(), cmd.query.clone()),
            ("max_rounds".to_string(), cmd.max_rounds.to_string()),
        ]
        .into(),
        ..RunConfig::default()
    }
    .echo(&cmd.out)?;

    let source = read_png(&cmd.source).map_err(|e| CliError::usage("source", e))?;
    let source_ref = sandbox
        .store
        .put(&source)
        .map_err(|e| CliError::runtime("io", e))?;
    let ep = run_episode(
        backend.as_ref(),
        &sandbox,
        EpisodeSpec {
            source: &source_ref,
            source_image: &source,
            query: &cmd.query,
            max_rounds: cmd.max_rounds,
            member: 0,
            seed,
        },
    )
    .map_err(|e| CliError::runtime("agent", e))?;

    let traj = &ep.trajectory;
    let final_image = sandbox
        .store
        .get(traj.final_image())
        .map_err(|e| CliError::runtime("io", e))?;
    let final_path = cmd.out.join("final.png");
    write_png(&final_path, &final_image).map_err(|e| CliError::io(&final_path, e))?;
    let line = serialize(&AnyTrajectory::Edit(traj.clone())) + "\n";
    common::write_file(&cmd.out.join("trajectory.jsonl"), line.as_bytes())?;
    common::write_file(&cmd.out.join("steps.log"), step_log(&ep).as_bytes())?;

    let replayed = traj
        .replay(&source, &sandbox.registry)
        .map_err(|e| CliError::runtime("replay", e))?;
    let summary = serde_json::json!({
        "rounds": traj.rounds().len(),
        "self_score": traj.self_eval().score(),
        "format_ok": traj.format_ok(),
        "final_hash": traj.final_image().hash.to_hex(),
        "replay_ok": traj.final_image().matches(&replayed),
    });
    common::write_file(
        &cmd.out.join("summary.json"),
        format!("{summary:#}\n").as_bytes(),
    )?;
    println!("{summary}");
    Ok(())
}
