//! TOML run configuration and the manifest written beside every run.
//!
//! ```
//! use clever::config::RunConfig;
//!
//! let cfg = RunConfig::from_toml_str("[data]\nkind = \"synth\"\n").unwrap();
//! assert_eq!(cfg.train.model.rho, 0.8);
//! assert_eq!(cfg.train.loss.lambda, 0.001);
//! assert_eq!(cfg.train.model.head_out, 256);
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_idx, load_ppm_dir, synth_shapes, Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::train::TrainConfig;

/// Head output width of the large-scale reference setup.
pub const REFERENCE_HEAD_OUT: usize = 65536;

pub const TOOL_NAME: &str = "clever";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Where the images come from. Relative paths resolve against the
/// directory of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSpec {
    Synth(SynthSpec),
    Idx { images: PathBuf, labels: PathBuf },
    Ppm { root: PathBuf, resolution: Option<usize> },
    /// A dataset previously saved in the container format.
    Cache { path: PathBuf },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Synth(SynthSpec::default())
    }
}

impl DataSpec {
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        let at = |p: &Path| base.join(p);
        match self {
            DataSpec::Synth(spec) => synth_shapes(spec),
            DataSpec::Idx { images, labels } => load_idx(&at(images), &at(labels)),
            DataSpec::Ppm { root, resolution } => {
                let load = load_ppm_dir(&at(root), *resolution)?;
                for p in &load.resized {
                    log::info!("resized {}", p.display());
                }
                Ok(load.dataset)
            }
            DataSpec::Cache { path } => Dataset::load(&at(path)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
}

fn from_table<T: DeserializeOwned>(table: toml::Table) -> Result<T> {
    serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let key = e.path().to_string();
        Error::Config {
            key: if key == "." { "config".into() } else { key },
            message: e.into_inner().to_string().lines().next().unwrap_or_default().to_string(),
        }
    })
}

fn parse_table(text: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| Error::config("config", e.to_string().trim_end().to_string()))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = from_table(parse_table(text)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let DataSpec::Synth(spec) = &self.data {
            spec.validate()?;
        }
        self.train.validate()?;
        self.probe.validate()
    }

    /// Overrides every seed that drives training and evaluation.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.probe.seed = seed;
    }
}

/// A parsed config file: the resolved configuration, its directory and the
/// hash of its bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    pub content_hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Reads either a plain run config or a manifest written by an earlier
/// run; a manifest contributes its resolved configuration.
pub fn parse_config(path: &Path) -> Result<LoadedConfig> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| Error::config("config", format!("{} is not UTF-8", path.display())))?;
    let table = parse_table(&text)?;
    let config = if table.contains_key("tool") {
        let manifest: RunManifest = from_table(table)?;
        manifest.config.validate()?;
        manifest.config
    } else {
        RunConfig::from_toml_str(&text)?
    };
    Ok(LoadedConfig {
        config,
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        content_hash: sha256_hex(&bytes),
    })
}

/// Everything needed to rerun a command: the resolved configuration with
/// every default materialized, the seed, the tool version and the files
/// the run produces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// SHA-256 of the config file, or "none" when defaults were used.
    pub config_hash: String,
    #[serde(default)]
    pub parameters: Vec<(String, String)>,
    #[serde(default)]
    pub artifacts: Vec<String>,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(command: &str, config: RunConfig, config_hash: Option<&str>) -> Self {
        RunManifest {
            tool: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
            command: command.into(),
            seed: config.train.seed,
            config_hash: config_hash.unwrap_or("none").into(),
            parameters: Vec::new(),
            artifacts: Vec::new(),
            config,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        let body = toml::to_string(self).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        Ok(format!(
            "# {TOOL_NAME} {TOOL_VERSION} run manifest\n\
             # config.train.model.head_out (K) = {}; reference value {REFERENCE_HEAD_OUT}\n\n{body}",
            self.config.train.model.head_out
        ))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        from_table(parse_table(text)?)
    }
}
