use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use txkb::context::ContextConfig;
use txkb::gateway::{Gateway, GatewayConfig, HttpGateway, MockGateway};
use txkb::kb::KbConfig;
use txkb::util::{sha256_hex, write_atomic};

use crate::error::{CliError, ErrorKind, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Raw transaction log for `ingest`.
    pub data: Option<PathBuf>,
    /// Separate label file for `ingest`.
    pub labels: Option<PathBuf>,
    /// Built-in adapter name or a TOML adapter file.
    pub adapter: Option<String>,
    pub histories: Option<PathBuf>,
    pub kb: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Essence catalog override (TOML).
    pub essences: Option<PathBuf>,
    pub target_spec: Option<PathBuf>,
}

/// Settings shared by every subcommand. A `--config` TOML file fills this
/// in, and command-line flags override it field by field.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub seed: Option<u64>,
    pub target: Option<String>,
    /// Pattern selection: random, llm or without-white-box.
    pub selection: Option<String>,
    /// Context strategy: zs, q, fi, qfi or kb.
    pub strategy: Option<String>,
    /// 0..=16 or `full`.
    pub shots: Option<String>,
    /// `mock:policy`, `mock:script:<file>` or `http`.
    pub gateway: Option<String>,
    pub test_fraction: Option<f64>,
    pub dataset: Option<String>,
    pub http: GatewayConfig,
    pub kb_config: KbConfig,
    pub context: ContextConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = read_input(path)?;
        toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message())))
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(7)
    }
}

/// Overwrites `slot` when the flag was given.
pub fn overlay<T>(slot: &mut Option<T>, flag: Option<T>) {
    if flag.is_some() {
        *slot = flag;
    }
}

pub fn require<'a, T>(value: &'a Option<T>, name: &str) -> Result<&'a T> {
    value.as_ref().ok_or_else(|| CliError::config(format!("missing required setting `{name}`")))
}

pub fn check_input(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::new(ErrorKind::MissingFile, format!("{}: no such file", path.display())))
    }
}

pub fn check_output(path: &Path) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => return Ok(()),
    };
    if parent.is_dir() {
        Ok(())
    } else {
        Err(CliError::new(ErrorKind::MissingFile, format!("{}: output directory does not exist", parent.display())))
    }
}

pub fn read_input(path: &Path) -> Result<String> {
    check_input(path)?;
    std::fs::read_to_string(path).map_err(|e| CliError::new(ErrorKind::Io, format!("{}: {e}", path.display())))
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Writes `path` atomically, then its sidecar.
pub fn write_output(
    path: &Path,
    bytes: &[u8],
    command: &str,
    cfg: &RunConfig,
    inputs: &[&Path],
    summary: Value,
) -> Result<()> {
    write_atomic(path, bytes).map_err(|e| CliError::new(ErrorKind::Io, format!("{}: {e}", path.display())))?;
    write_sidecar(path, command, cfg, inputs, summary)
}

/// Writes `<path>.meta.json` recording the command, the resolved
/// configuration, input and output digests and a summary.
pub fn write_sidecar(path: &Path, command: &str, cfg: &RunConfig, inputs: &[&Path], summary: Value) -> Result<()> {
    let mut digests = serde_json::Map::new();
    for p in inputs {
        let bytes = std::fs::read(p)?;
        digests.insert(p.display().to_string(), Value::String(sha256_hex(&bytes)));
    }
    let meta = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg.to_json(),
        "inputs": digests,
        "output_sha256": sha256_hex(&std::fs::read(path)?),
        "summary": summary,
    });
    let side = sidecar_path(path);
    let mut text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    text.push('\n');
    write_atomic(&side, text.as_bytes()).map_err(|e| CliError::new(ErrorKind::Io, format!("{}: {e}", side.display())))?;
    Ok(())
}

/// Reads a sidecar if one exists next to `path`.
pub fn read_sidecar(path: &Path) -> Option<Value> {
    let text = std::fs::read_to_string(sidecar_path(path)).ok()?;
    serde_json::from_str(&text).ok()
}

pub fn open_gateway(cfg: &RunConfig) -> Result<Box<dyn Gateway>> {
    let spec = require(&cfg.gateway, "gateway")?;
    match spec.as_str() {
        "mock:policy" => Ok(Box::new(MockGateway::policy())),
        "http" => Ok(Box::new(HttpGateway::new(cfg.http.clone())?)),
        s => match s.strip_prefix("mock:script:") {
            Some(file) => {
                let path = Path::new(file);
                check_input(path)?;
                Ok(Box::new(MockGateway::from_script_file(path)?))
            }
            None => Err(CliError::config(format!(
                "unknown gateway `{s}` (expected mock:policy, mock:script:<file> or http)"
            ))),
        },
    }
}

/// Validates a gateway spec without opening it.
pub fn check_gateway(cfg: &RunConfig) -> Result<()> {
    let spec = require(&cfg.gateway, "gateway")?;
    if let Some(file) = spec.strip_prefix("mock:script:") {
        return check_input(Path::new(file));
    }
    match spec.as_str() {
        "mock:policy" => Ok(()),
        "http" => Ok(cfg.http.validate()?),
        s => Err(CliError::config(format!("unknown gateway `{s}` (expected mock:policy, mock:script:<file> or http)"))),
    }
}
