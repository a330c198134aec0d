//! Run configuration: one JSON document that pins everything a training or
//! ablation run needs. Unknown keys anywhere in the document are rejected,
//! and the fully-resolved form is echoed into each run directory so the
//! echo alone reproduces the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lsct::model::{Mode, ModelConfig};
use lsct::signal::SynthParams;
use lsct::train::TrainConfig;

use crate::commands::CliError;

/// Environment variable that, when set, takes precedence over the
/// `--config` flag. It is the only environment override the tools honor.
pub const CONFIG_ENV: &str = "LSCT_CONFIG";

/// Where the training data lives and how it was generated.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Manifest path; relative paths resolve against the config file's
    /// directory.
    pub manifest: PathBuf,
    /// Generator knobs, recorded for provenance.
    pub synth: SynthParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { manifest: PathBuf::from("data/manifest.json"), synth: SynthParams::default() }
    }
}

/// Evaluation defaults used by training-time validation echoes and sweeps.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mask_ratios: Vec<f64>,
    pub seed: u64,
    /// How many test segments get overlay plots.
    pub plot_segments: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { mask_ratios: vec![0.1, 0.3, 0.5, 0.7, 0.9], seed: 0, plot_segments: 8 }
    }
}

/// The whole run document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Which lookup/enhancement paths the trained model runs.
    pub mode: Mode,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::CamMsek,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Every violation in the document, empty when it is usable.
    #[must_use]
    pub fn violations(&self) -> Vec<String> {
        let mut out = self.train.violations();
        if let Err(e) = self.model.dims() {
            out.push(format!("model: {e}"));
        }
        if let Err(e) = self.data.synth.validate() {
            out.push(format!("data.synth: {e}"));
        }
        if self.eval.mask_ratios.is_empty() {
            out.push("eval.mask_ratios: must list at least one ratio".into());
        }
        for &r in &self.eval.mask_ratios {
            if !(0.0..1.0).contains(&r) {
                out.push(format!("eval.mask_ratios: {r} outside [0, 1)"));
            }
        }
        out
    }
}

/// Picks the config path: the environment override wins, then the flag.
pub fn resolve_config_path(flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    if let Ok(v) = std::env::var(CONFIG_ENV) {
        if !v.is_empty() {
            return Ok(PathBuf::from(v));
        }
    }
    flag.ok_or(CliError::NoConfig)
}

/// Loads and fully resolves a run configuration: the manifest path becomes
/// absolute-or-config-relative so the echoed document is location
/// independent.
pub fn load_run_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io { path: path.display().to_string(), source: e })?;
    let mut config: RunConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::ConfigParse { path: path.display().to_string(), source: e })?;
    let violations = config.violations();
    if !violations.is_empty() {
        return Err(CliError::InvalidConfig(violations));
    }
    if config.data.manifest.is_relative() {
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        config.data.manifest = base.join(&config.data.manifest);
    }
    Ok(config)
}

/// Serializes the fully-resolved configuration for the run-directory echo.
pub fn effective_config_json(config: &RunConfig) -> Result<String, CliError> {
    let mut json = serde_json::to_string_pretty(config).map_err(CliError::Json)?;
    json.push('\n');
    Ok(json)
}
