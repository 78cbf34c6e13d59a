//! Run configuration: a TOML document, validated in full before any work starts.
//!
//! ```toml
//! seed = 1
//! out_dir = "runs/a"            # optional; --out wins
//! checkpoint_dtype = "f64"      # storage precision of parameter blobs
//!
//! [model]
//! preset = "mnist_small"        # or: graph = "net.json" (a graph description)
//!
//! [data]
//! kind = "synthetic"            # synthetic | mnist | cifar10
//! test_samples = 1000           # synthetic only: held-out tail of the generated set
//! standardize = true
//! [data.synthetic]              # SynthSpec fields
//! samples = 6000
//!
//! [train]                       # IstaConfig fields
//! rho = 0.05
//! [finetune]                    # IstaConfig fields, γ trained by plain SGD by default
//! max_steps = 400
//! [eval]
//! batch_size = 500
//! ```

use std::path::{Path, PathBuf};

use chanprune::data::{AugmentConfig, SynthSpec};
use chanprune::presets::Preset;
use chanprune::sparsify::{GammaUpdate, IstaConfig};
use chanprune::DType;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint_dtype: DType,
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub train: IstaConfig,
    #[serde(default = "default_finetune")]
    pub finetune: IstaConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_finetune() -> IstaConfig {
    IstaConfig { gamma_update: GammaUpdate::Sgd, max_steps: 500, ..IstaConfig::default() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: Option<String>,
    /// JSON graph description; parameters are freshly initialized.
    pub graph: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Synthetic,
    Mnist,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    pub synthetic: Option<SynthSpec>,
    /// Synthetic data: number of trailing samples held out for evaluation.
    pub test_samples: Option<usize>,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    #[serde(default)]
    pub train_files: Vec<PathBuf>,
    #[serde(default)]
    pub test_files: Vec<PathBuf>,
    /// Standardize with per-channel statistics of the training set.
    #[serde(default = "yes")]
    pub standardize: bool,
    pub augment: Option<AugmentConfig>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { batch_size: 500 }
    }
}

/// Sets `key` (dotted path) in a TOML table. The value is parsed as a TOML
/// value when possible (`0.1`, `true`, `"x"`, `[1, 2]`) and taken as a bare
/// string otherwise.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("override `{assignment}` is not KEY=VALUE")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::usage(format!("override key `{key}` is malformed")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::usage(format!("override `{key}`: `{part}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses a config document, applying overrides before validation.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc: toml::Table =
            text.parse().map_err(|e| CliError::usage(format!("config is not valid TOML: {e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::usage(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("reading config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        cfg.validate_files()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut self.data;
        for p in
            [&mut d.train_images, &mut d.train_labels, &mut d.test_images, &mut d.test_labels, &mut self.model.graph]
                .into_iter()
                .flatten()
        {
            fix(p);
        }
        d.train_files.iter_mut().chain(d.test_files.iter_mut()).for_each(fix);
    }

    /// Structural validation; does not touch the filesystem.
    pub fn validate(&self) -> Result<(), CliError> {
        let u = |m: String| Err(CliError::usage(m));
        match (&self.model.preset, &self.model.graph) {
            (Some(p), None) => {
                p.parse::<Preset>().map_err(|e| CliError::usage(format!("model.preset: {e}")))?;
            }
            (None, Some(_)) => {}
            _ => return u("model needs exactly one of `preset` or `graph`".into()),
        }
        self.train.validate().map_err(|e| CliError::usage(format!("train: {e}")))?;
        self.finetune.validate().map_err(|e| CliError::usage(format!("finetune: {e}")))?;
        if self.eval.batch_size == 0 {
            return u("eval.batch_size must be positive".into());
        }
        let d = &self.data;
        match d.kind {
            DataKind::Synthetic => {
                let spec = d.synthetic.clone().unwrap_or_default();
                spec.validate().map_err(|e| CliError::usage(format!("data.synthetic: {e}")))?;
                let t = d.test_samples.unwrap_or(0);
                if t == 0 || t >= spec.samples {
                    return u(format!("data.test_samples must be in [1, {}) for synthetic data", spec.samples));
                }
            }
            DataKind::Mnist => {
                if d.train_images.is_none()
                    || d.train_labels.is_none()
                    || d.test_images.is_none()
                    || d.test_labels.is_none()
                {
                    return u("mnist data needs train_images, train_labels, test_images and test_labels".into());
                }
            }
            DataKind::Cifar10 => {
                if d.train_files.is_empty() || d.test_files.is_empty() {
                    return u("cifar10 data needs train_files and test_files".into());
                }
            }
        }
        if d.kind != DataKind::Synthetic && (d.synthetic.is_some() || d.test_samples.is_some()) {
            return u("data.synthetic and data.test_samples only apply to kind = \"synthetic\"".into());
        }
        if let Some(a) = &d.augment {
            if let (Some(p), Some(c)) = (a.pad_to, a.crop) {
                if c > p {
                    return u(format!("data.augment: crop {c} exceeds pad_to {p}"));
                }
            }
        }
        Ok(())
    }

    /// Checks that every referenced input file exists.
    pub fn validate_files(&self) -> Result<(), CliError> {
        let d = &self.data;
        let files = [&d.train_images, &d.train_labels, &d.test_images, &d.test_labels, &self.model.graph]
            .into_iter()
            .flatten()
            .chain(d.train_files.iter())
            .chain(d.test_files.iter());
        for f in files {
            if !f.is_file() {
                return Err(CliError::io(format!("input file {} does not exist", f.display())));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
