use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use sepolab::agent::Sandbox;
use sepolab::policy::{Backend, RemoteBackend, ScriptedBackend, AGENT_PROMPT};
use sepolab::sepo::{ToyEnvConfig, TrainConfig};
use sepolab::toolbox::{DirStore, ImageStore};
use sepolab::wire::WireClient;
use sepolab::Registry;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const BACKEND_ENV: &str = "SEPOLAB_BACKEND";
pub const JUDGE_ENV: &str = "SEPOLAB_JUDGE";
pub const TIMEOUT: Duration = Duration::from_secs(120);
pub const CONFIG_ECHO: &str = "effective_config.toml";

/// Where a model-backed client comes from: a local script file or the
/// endpoint named by environment variables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientSpec {
    Scripted(PathBuf),
    Remote,
}

impl std::str::FromStr for ClientSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "remote" {
            return Ok(ClientSpec::Remote);
        }
        match s.strip_prefix("scripted:") {
            Some(p) if !p.is_empty() => Ok(ClientSpec::Scripted(PathBuf::from(p))),
            _ => Err(format!("expected `scripted:FILE` or `remote`, got `{s}`")),
        }
    }
}

impl std::fmt::Display for ClientSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClientSpec::Scripted(p) => write!(f, "scripted:{}", p.display()),
            ClientSpec::Remote => f.write_str("remote"),
        }
    }
}

/// Merged view of everything a run depended on, echoed into the output
/// directory. Config files use the same shape; unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registry: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub inputs: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub options: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy: Option<ToyEnvConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage("config", format!("{}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::usage("config", format!("{}: {e}", path.display())))
    }

    /// Writes the echo; the output directory must already exist.
    pub fn echo(&self, out: &Path) -> CliResult<()> {
        let text = toml::to_string(self).map_err(|e| CliError::runtime("config", e))?;
        write_file(&out.join(CONFIG_ECHO), text.as_bytes())
    }
}

pub fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::usage(
            "not_found",
            format!("{what} not found: {}", path.display()),
        ))
    }
}

pub fn create_out(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out)
        .map_err(|e| CliError::usage("out_dir", format!("{}: {e}", out.display())))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(bytes)
        .and_then(|_| f.flush())
        .map_err(|e| CliError::io(path, e))
}

pub fn load_registry(path: Option<&Path>) -> CliResult<Registry> {
    let Some(path) = path else {
        return Ok(Registry::builtin());
    };
    require_file(path, "registry")?;
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::usage("registry", format!("{}: {e}", path.display())))?;
    Registry::from_toml(&text)
        .map_err(|e| CliError::usage("registry", format!("{}: {e}", path.display())))
}

/// Image store rooted at `<out>/images`. The root is absolute so stored
/// references resolve from any working directory.
pub fn image_store(out: &Path) -> CliResult<Arc<dyn ImageStore>> {
    let root = std::path::absolute(out.join("images")).map_err(|e| CliError::io(out, e))?;
    Ok(Arc::new(
        DirStore::new(root).map_err(|e| CliError::runtime("io", e))?,
    ))
}

pub fn sandbox(out: &Path, registry: Registry) -> CliResult<Sandbox> {
    Ok(Sandbox::new(Arc::new(registry), image_store(out)?))
}

pub fn wire_client(prefix: &str) -> CliResult<WireClient> {
    WireClient::from_env(prefix, TIMEOUT).map_err(|e| CliError::usage("client", e))
}

pub fn backend(spec: &ClientSpec, store: Arc<dyn ImageStore>) -> CliResult<Box<dyn Backend>> {
    Ok(match spec {
        ClientSpec::Scripted(path) => {
            require_file(path, "script")?;
            Box::new(ScriptedBackend::from_file(path).map_err(|e| CliError::usage("script", e))?)
        }
        ClientSpec::Remote => Box::new(RemoteBackend::new(
            wire_client(BACKEND_ENV)?,
            store,
            AGENT_PROMPT,
        )),
    })
}

/// Parses a JSON file into `T`, reporting failures as usage errors.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> CliResult<T> {
    require_file(path, what)?;
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::usage("schema", format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::usage("schema", format!("{}: {e}", path.display())))
}
