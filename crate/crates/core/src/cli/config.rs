use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::collapse::CollapseConfig;
use crate::datasets::{generate, load_dir, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{LinearProbeConfig, LocalizationConfig};
use crate::patchify::AccountingConfig;
use crate::trainer::TrainConfig;

/// Where images come from and how they are split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Directory with an `index.txt`; empty means generate synthetically.
    pub path: String,
    pub train: usize,
    pub test: usize,
    pub synthetic: SyntheticSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            path: String::new(),
            train: 2400,
            test: 600,
            synthetic: SyntheticSpec::default(),
        }
    }
}

impl DatasetConfig {
    /// Train and test splits: the first `train` samples and the next `test`.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        if self.train == 0 || self.test == 0 {
            return Err(Error::Config("dataset.train and dataset.test must be positive".into()));
        }
        let n = self.train + self.test;
        let ds = if self.path.is_empty() {
            generate(&self.synthetic, n)?
        } else {
            let ds = load_dir(Path::new(&self.path))?;
            if ds.len() < n {
                return Err(Error::Config(format!(
                    "dataset.path holds {} samples but train + test = {n}",
                    ds.len()
                )));
            }
            ds
        };
        let (train, rest) = ds.split(self.train)?;
        let (test, _) = rest.split(self.test)?;
        Ok((train, test))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub knn_k: usize,
    pub knn_temperature: f64,
    /// Square resolution images are resized to before encoding; 0 uses the
    /// training global-view resolution.
    pub resolution: usize,
    pub linear: LinearProbeConfig,
    pub localization: LocalizationConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            knn_k: 20,
            knn_temperature: 0.07,
            resolution: 0,
            linear: LinearProbeConfig::default(),
            localization: LocalizationConfig::default(),
        }
    }
}

/// Everything one invocation needs. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds training and the collapse lab; overrides their own seed fields.
    pub seed: u64,
    pub out: PathBuf,
    /// Save a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub collapse: CollapseConfig,
    pub accounting: AccountingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            checkpoint_every: 10,
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            collapse: CollapseConfig::default(),
            accounting: AccountingConfig::default(),
        }
    }
}

impl RunConfig {
    /// Propagates the top-level seed and validates.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.collapse.seed = self.seed;
        self.train.validate()?;
        self.dataset.synthetic.validate()?;
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("resolved.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn eval_resolution(&self) -> usize {
        match self.eval.resolution {
            0 => self.train.views.global_res,
            r => r,
        }
    }
}

/// Short override keys and the paths they stand for.
pub const ALIASES: &[(&str, &str)] = &[
    ("lambda", "train.loss.lambda"),
    ("q", "train.views.query_count"),
    ("flow", "train.flow.mode"),
    ("epochs", "train.optim.epochs"),
    ("batch", "train.optim.batch_size"),
    ("steps", "collapse.steps"),
    ("mode", "collapse.mode"),
];

/// Applies one `key=value` override. The value is read as a TOML literal
/// when it parses as one and as a bare string otherwise.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not KEY=VALUE")))?;
    let key = key.trim();
    let key = ALIASES.iter().find(|(a, _)| *a == key).map_or(key, |(_, p)| p);
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p:?} is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Reads `path` (if any), applies overrides in order and deserializes.
/// Field-level problems surface as [`Error::Config`].
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: RunConfig = toml::Value::Table(doc)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string().trim().to_string()))?;
    cfg.resolve()
}
