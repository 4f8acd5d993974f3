//! Experiment configuration: flat key-value TOML files and output-path
//! resolution.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use srfuse_core::train::{ModelKind, OptimizerConfig};
use srfuse_core::{Error, Result};

/// Environment variable naming the root directory that relative output
/// paths resolve under.
pub const OUTPUT_ROOT_VAR: &str = "SRFUSE_OUTPUT_ROOT";

/// Resolve an output path: absolute paths pass through; relative paths
/// resolve under `$SRFUSE_OUTPUT_ROOT` when it is set.
pub fn resolve_output(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

/// One training experiment, read from a flat key-value TOML file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset manifest path.
    pub dataset: String,
    /// `misr`, `sisr` or `misr_consistency`.
    pub model: String,
    /// Trunk channel width of the super-resolution network.
    #[serde(default = "default_width")]
    pub width: usize,
    /// Residual blocks (encoder blocks for fusion, trunk blocks for the
    /// single-image network).
    #[serde(default = "default_blocks")]
    pub residual_blocks: usize,
    /// Registration network channel width.
    #[serde(default = "default_shift_width")]
    pub shift_width: usize,
    /// Color-match head hidden width (consistency model only).
    #[serde(default = "default_cm_hidden")]
    pub cm_hidden: usize,
    /// `mse`, `mae` or `ssim`.
    #[serde(default = "default_recon_loss")]
    pub recon_loss: String,
    /// Consistency-objective weights (consistency model only).
    #[serde(default = "default_w_consistency")]
    pub w_consistency: f64,
    #[serde(default = "default_w_sr")]
    pub w_sr: f64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_plateau_patience")]
    pub plateau_patience: usize,
    #[serde(default = "default_lr_decay_factor")]
    pub lr_decay_factor: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Output directory (resolved against `$SRFUSE_OUTPUT_ROOT` when
    /// relative).
    pub output_dir: String,
}

fn default_width() -> usize {
    64
}
fn default_blocks() -> usize {
    2
}
fn default_shift_width() -> usize {
    64
}
fn default_cm_hidden() -> usize {
    64
}
fn default_recon_loss() -> String {
    "ssim".to_string()
}
fn default_w_consistency() -> f64 {
    0.9
}
fn default_w_sr() -> f64 {
    0.1
}
fn default_learning_rate() -> f64 {
    0.0007
}
fn default_plateau_patience() -> usize {
    2
}
fn default_lr_decay_factor() -> f64 {
    0.5
}
fn default_epochs() -> usize {
    50
}
fn default_batch_size() -> usize {
    8
}

impl ExperimentConfig {
    /// Parse a flat key-value TOML file.  Nested tables are rejected so
    /// configs stay grep-able single-level key lists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        let value: toml::Value = text
            .parse()
            .map_err(|e| Error::schema(format!("{}: {e}", path.display())))?;
        if let toml::Value::Table(table) = &value {
            for (key, v) in table {
                if matches!(v, toml::Value::Table(_) | toml::Value::Array(_)) {
                    return Err(Error::schema(format!(
                        "{}: key {key:?} is nested; configs are flat key = value lists",
                        path.display()
                    )));
                }
            }
        }
        let cfg: ExperimentConfig = value
            .try_into()
            .map_err(|e| Error::schema(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_kind()?;
        self.optimizer().validate()?;
        if !Path::new(&self.dataset).exists() {
            return Err(Error::invalid(format!(
                "dataset manifest {} does not exist",
                self.dataset
            )));
        }
        if self.width < 1 || self.shift_width < 1 || self.cm_hidden < 1 {
            return Err(Error::invalid("network widths must be >= 1"));
        }
        match self.recon_loss.as_str() {
            "mse" | "mae" | "ssim" => {}
            other => {
                return Err(Error::invalid(format!(
                    "recon_loss {other:?} (expected mse, mae or ssim)"
                )))
            }
        }
        if self.w_consistency < 0.0 || self.w_sr < 0.0 {
            return Err(Error::invalid("objective weights must be non-negative"));
        }
        Ok(())
    }

    pub fn model_kind(&self) -> Result<ModelKind> {
        self.model.parse()
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.learning_rate,
            plateau_patience: self.plateau_patience,
            lr_decay_factor: self.lr_decay_factor,
            max_epochs: self.epochs,
            batch_size: self.batch_size,
        }
    }
}
