//! Flat `key = value` experiment configuration.
//!
//! ```text
//! # comments and blank lines are ignored
//! experiment = feature_sweep
//! d_grid = 10, 50, 100
//! lambda_grid = 1e-8
//! ```

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::{default_d_grid, Experiment};
use crate::data::{self, DataError, Dataset, Sampling};
use crate::mlp::TrainConfig;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("line {line}: expected `key = value`, got '{text}'")]
    Syntax { line: usize, text: String },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("duplicate config key '{0}'")]
    DuplicateKey(String),
    #[error("conflicting overrides for '{key}': '{first}' and '{second}'")]
    ConflictingOverride { key: String, first: String, second: String },
    #[error("bad value for '{key}': {reason}")]
    BadValue { key: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Synthetic,
    Mnist,
}

/// Every accepted key, in rendering order.
pub const CONFIG_KEYS: &[&str] = &[
    "experiment",
    "dataset",
    "mnist_images",
    "mnist_labels",
    "n_train",
    "n_test",
    "data_seed",
    "sampling",
    "n_per_class",
    "classes",
    "input_dim",
    "center_scale",
    "seed",
    "repeats",
    "d_grid",
    "h_grid",
    "lambda_grid",
    "r_grid",
    "feature_scale",
    "include_bias",
    "anchor_bias",
    "anchor_per_column",
    "switch_off_h",
    "learning_rate",
    "batch_size",
    "max_epochs",
    "patience",
    "val_fraction",
    "early_stop",
    "init_scale",
    "output_dir",
    "jobs",
];

// Keys that change where or how fast results are produced, not what they are.
const UNHASHED: &[&str] = &["output_dir", "jobs"];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub experiment: Experiment,
    pub dataset: DataKind,
    pub mnist_images: PathBuf,
    pub mnist_labels: PathBuf,
    pub n_train: usize,
    pub n_test: usize,
    pub data_seed: u64,
    pub sampling: Sampling,
    pub n_per_class: usize,
    pub classes: usize,
    pub input_dim: usize,
    pub center_scale: f64,
    pub seed: u64,
    pub repeats: usize,
    /// `None` selects [`default_d_grid`] around `n_train`.
    pub d_grid: Option<Vec<usize>>,
    pub h_grid: Vec<usize>,
    pub lambda_grid: Vec<f64>,
    pub r_grid: Vec<f64>,
    pub feature_scale: f64,
    pub include_bias: bool,
    pub anchor_bias: bool,
    pub anchor_per_column: bool,
    pub switch_off_h: Option<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    /// `None`: on for scratch sweeps, off for reuse sweeps.
    pub early_stop: Option<bool>,
    /// `None`: 0.1 for scratch sweeps, 1.0 for reuse sweeps.
    pub init_scale: Option<f64>,
    pub output_dir: PathBuf,
    /// Worker threads; 0 lets rayon decide.
    pub jobs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            experiment: Experiment::FeatureSweep,
            dataset: DataKind::Synthetic,
            mnist_images: PathBuf::from("train-images-idx3-ubyte"),
            mnist_labels: PathBuf::from("train-labels-idx1-ubyte"),
            n_train: 300,
            n_test: 300,
            data_seed: 0,
            sampling: Sampling::Uniform,
            n_per_class: 60,
            classes: 10,
            input_dim: 64,
            center_scale: 1.0,
            seed: 0,
            repeats: 1,
            d_grid: None,
            h_grid: (2..=60).step_by(2).collect(),
            lambda_grid: vec![1e-8],
            r_grid: vec![0.0],
            feature_scale: 1.0,
            include_bias: true,
            anchor_bias: true,
            anchor_per_column: false,
            switch_off_h: None,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            val_fraction: t.val_fraction,
            early_stop: None,
            init_scale: None,
            output_dir: PathBuf::from("results"),
            jobs: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.trim().parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_string(),
        reason: format!("'{value}': {e}"),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: Display,
{
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(ConfigError::BadValue { key: key.into(), reason: format!("'{value}' is not a boolean") }),
    }
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: Display,
{
    match value.trim() {
        "none" | "never" | "auto" | "" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

fn opt<T: Display>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), ToString::to_string)
}

/// Splits config text into `(key, value)` pairs, rejecting unknown and
/// repeated keys.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut seen = BTreeMap::new();
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.trim().to_string() })?;
        let key = key.trim().to_string();
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(ConfigError::UnknownKey(key));
        }
        if seen.insert(key.clone(), ()).is_some() {
            return Err(ConfigError::DuplicateKey(key));
        }
        pairs.push((key, value.trim().to_string()));
    }
    Ok(pairs)
}

/// Parses `key=value` override flags. Repeating a key with the same value is
/// allowed; with a different value it is an error.
pub fn parse_overrides(flags: &[String]) -> Result<Vec<(String, String)>, ConfigError> {
    let mut seen: BTreeMap<String, String> = BTreeMap::new();
    let mut out = Vec::new();
    for flag in flags {
        let (key, value) = flag.split_once('=').ok_or_else(|| ConfigError::Syntax { line: 0, text: flag.clone() })?;
        let (key, value) = (key.trim().to_string(), value.trim().to_string());
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(ConfigError::UnknownKey(key));
        }
        match seen.get(&key) {
            Some(first) if *first != value => {
                return Err(ConfigError::ConflictingOverride { key, first: first.clone(), second: value })
            }
            Some(_) => continue,
            None => {
                seen.insert(key.clone(), value.clone());
                out.push((key, value));
            }
        }
    }
    Ok(out)
}

impl SweepConfig {
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_text(&text)
    }

    /// Applies `key=value` flags after the file has been parsed.
    pub fn apply_overrides(&mut self, flags: &[String]) -> Result<(), ConfigError> {
        for (k, v) in parse_overrides(flags)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "experiment" => {
                self.experiment = v.parse().map_err(|reason| ConfigError::BadValue { key: key.into(), reason })?
            }
            "dataset" => {
                self.dataset = match v {
                    "synthetic" => DataKind::Synthetic,
                    "mnist" => DataKind::Mnist,
                    _ => return Err(ConfigError::BadValue { key: key.into(), reason: format!("'{v}' is not synthetic or mnist") }),
                }
            }
            "mnist_images" => self.mnist_images = PathBuf::from(v),
            "mnist_labels" => self.mnist_labels = PathBuf::from(v),
            "n_train" => self.n_train = parse(key, v)?,
            "n_test" => self.n_test = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "sampling" => {
                self.sampling = match v {
                    "uniform" => Sampling::Uniform,
                    "balanced" => Sampling::Balanced,
                    _ => return Err(ConfigError::BadValue { key: key.into(), reason: format!("'{v}' is not uniform or balanced") }),
                }
            }
            "n_per_class" => self.n_per_class = parse(key, v)?,
            "classes" => self.classes = parse(key, v)?,
            "input_dim" => self.input_dim = parse(key, v)?,
            "center_scale" => self.center_scale = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "repeats" => self.repeats = parse(key, v)?,
            "d_grid" => self.d_grid = if v == "auto" { None } else { Some(parse_list(key, v)?) },
            "h_grid" => self.h_grid = parse_list(key, v)?,
            "lambda_grid" => self.lambda_grid = parse_list(key, v)?,
            "r_grid" => self.r_grid = parse_list(key, v)?,
            "feature_scale" => self.feature_scale = parse(key, v)?,
            "include_bias" => self.include_bias = parse_bool(key, v)?,
            "anchor_bias" => self.anchor_bias = parse_bool(key, v)?,
            "anchor_per_column" => self.anchor_per_column = parse_bool(key, v)?,
            "switch_off_h" => self.switch_off_h = parse_opt(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "max_epochs" => self.max_epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "val_fraction" => self.val_fraction = parse(key, v)?,
            "early_stop" => self.early_stop = if v == "auto" { None } else { Some(parse_bool(key, v)?) },
            "init_scale" => self.init_scale = parse_opt(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "jobs" => self.jobs = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "experiment" => self.experiment.to_string(),
            "dataset" => match self.dataset {
                DataKind::Synthetic => "synthetic".into(),
                DataKind::Mnist => "mnist".into(),
            },
            "mnist_images" => self.mnist_images.display().to_string(),
            "mnist_labels" => self.mnist_labels.display().to_string(),
            "n_train" => self.n_train.to_string(),
            "n_test" => self.n_test.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "sampling" => match self.sampling {
                Sampling::Uniform => "uniform".into(),
                Sampling::Balanced => "balanced".into(),
            },
            "n_per_class" => self.n_per_class.to_string(),
            "classes" => self.classes.to_string(),
            "input_dim" => self.input_dim.to_string(),
            "center_scale" => self.center_scale.to_string(),
            "seed" => self.seed.to_string(),
            "repeats" => self.repeats.to_string(),
            "d_grid" => self.d_grid.as_deref().map_or_else(|| "auto".into(), join),
            "h_grid" => join(&self.h_grid),
            "lambda_grid" => join(&self.lambda_grid),
            "r_grid" => join(&self.r_grid),
            "feature_scale" => self.feature_scale.to_string(),
            "include_bias" => self.include_bias.to_string(),
            "anchor_bias" => self.anchor_bias.to_string(),
            "anchor_per_column" => self.anchor_per_column.to_string(),
            "switch_off_h" => opt(&self.switch_off_h, "none"),
            "learning_rate" => self.learning_rate.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "patience" => self.patience.to_string(),
            "val_fraction" => self.val_fraction.to_string(),
            "early_stop" => opt(&self.early_stop, "auto"),
            "init_scale" => opt(&self.init_scale, "auto"),
            "output_dir" => self.output_dir.display().to_string(),
            "jobs" => self.jobs.to_string(),
            _ => unreachable!("CONFIG_KEYS and value_of out of sync: {key}"),
        }
    }

    /// Canonical text form; parses back to an equal config.
    pub fn render(&self) -> String {
        CONFIG_KEYS.iter().map(|k| format!("{k} = {}\n", self.value_of(k))).collect()
    }

    /// First 12 hex digits of SHA-256 over the result-affecting keys.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for k in CONFIG_KEYS.iter().filter(|k| !UNHASHED.contains(k)) {
            h.update(format!("{k}={}\n", self.value_of(k)));
        }
        h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let increasing = |g: &[usize]| g.windows(2).all(|w| w[0] < w[1]);
        let sorted = |g: &[f64]| g.windows(2).all(|w| w[0] <= w[1]);
        if self.repeats == 0 {
            return bad("repeats must be ≥ 1".into());
        }
        if self.n_train == 0 {
            return bad("n_train must be ≥ 1".into());
        }
        if let Some(g) = &self.d_grid {
            if g.is_empty() || !increasing(g) {
                return bad("d_grid must be non-empty and strictly increasing".into());
            }
        }
        if self.h_grid.is_empty() || !increasing(&self.h_grid) {
            return bad("h_grid must be non-empty and strictly increasing".into());
        }
        for (name, g) in [("lambda_grid", &self.lambda_grid), ("r_grid", &self.r_grid)] {
            if g.is_empty() || !sorted(g) {
                return bad(format!("{name} must be non-empty and sorted"));
            }
            if g.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return bad(format!("{name} values must be finite and ≥ 0"));
            }
        }
        if !(self.feature_scale > 0.0 && self.feature_scale.is_finite()) {
            return bad("feature_scale must be > 0".into());
        }
        if let Some(s) = self.init_scale {
            if !(s > 0.0 && s.is_finite()) {
                return bad("init_scale must be > 0".into());
            }
        }
        if self.experiment.is_nn() {
            self.train_config(self.seed).validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if self.dataset == DataKind::Synthetic && self.n_per_class * self.classes < self.n_train + self.n_test {
            return bad(format!(
                "synthetic data has {}·{} rows, fewer than n_train + n_test = {}",
                self.n_per_class,
                self.classes,
                self.n_train + self.n_test
            ));
        }
        Ok(())
    }

    /// Feature-count grid, resolving `auto` around `n_train`.
    pub fn capacity_grid(&self, n_train: usize) -> Vec<usize> {
        match &self.d_grid {
            Some(g) => g.clone(),
            None => default_d_grid(n_train, 10, 3 * n_train, 24),
        }
    }

    pub fn effective_early_stop(&self) -> bool {
        self.early_stop.unwrap_or(self.experiment == Experiment::NnScratchSweep)
    }

    pub fn effective_init_scale(&self) -> f64 {
        self.init_scale.unwrap_or(if self.experiment == Experiment::NnScratchSweep { 0.1 } else { 1.0 })
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            val_fraction: self.val_fraction,
            seed,
            early_stop: self.effective_early_stop(),
        }
    }

    /// Loads and splits the configured dataset. Relative MNIST paths are
    /// resolved against `data_dir`.
    pub fn load_dataset(&self, data_dir: &Path) -> Result<Dataset, DataError> {
        let full = match self.dataset {
            DataKind::Synthetic => {
                data::synth_gaussian_classes(self.data_seed, self.n_per_class, self.classes, self.input_dim, self.center_scale)?
            }
            DataKind::Mnist => data::load_mnist_idx(&data_dir.join(&self.mnist_images), &data_dir.join(&self.mnist_labels))?,
        };
        data::subsample_and_split_with(&full, self.data_seed, self.n_train, self.n_test, self.sampling)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_renders_and_parses_back() {
        let cfg = SweepConfig::default();
        assert_eq!(SweepConfig::from_text(&cfg.render()).unwrap(), cfg);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn comments_lists_and_options() {
        let cfg = SweepConfig::from_text(
            "# header\nexperiment = nn-reuse-sweep\nh_grid = 1, 2,3 # trailing\n\nswitch_off_h = never\nlambda_grid = 1e-8, 0.01\n",
        )
        .unwrap();
        assert_eq!(cfg.experiment, Experiment::NnReuseSweep);
        assert_eq!(cfg.h_grid, vec![1, 2, 3]);
        assert_eq!(cfg.switch_off_h, None);
        assert_eq!(cfg.lambda_grid, vec![1e-8, 0.01]);
        assert!(cfg.effective_early_stop() == false);
    }

    #[test]
    fn parse_errors() {
        assert_eq!(SweepConfig::from_text("colour = red"), Err(ConfigError::UnknownKey("colour".into())));
        assert_eq!(SweepConfig::from_text("seed = 1\nseed = 2"), Err(ConfigError::DuplicateKey("seed".into())));
        assert!(matches!(SweepConfig::from_text("seed 1"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(SweepConfig::from_text("repeats = -1"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(SweepConfig::from_text("include_bias = maybe"), Err(ConfigError::BadValue { .. })));
    }

    #[test]
    fn overrides_apply_after_file_and_conflicts_fail() {
        let mut cfg = SweepConfig::from_text("seed = 4").unwrap();
        cfg.apply_overrides(&["seed=9".into(), "seed=9".into()]).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(
            cfg.apply_overrides(&["seed=1".into(), "seed=2".into()]),
            Err(ConfigError::ConflictingOverride { key: "seed".into(), first: "1".into(), second: "2".into() })
        );
        assert!(cfg.apply_overrides(&["nope=1".into()]).is_err());
    }

    #[test]
    fn validation_rejects_bad_grids() {
        let unsorted = SweepConfig { d_grid: Some(vec![10, 5]), ..SweepConfig::default() };
        assert!(unsorted.validate().is_err());
        let empty = SweepConfig { lambda_grid: vec![], ..SweepConfig::default() };
        assert!(empty.validate().is_err());
        let zero = SweepConfig { repeats: 0, ..SweepConfig::default() };
        assert!(zero.validate().is_err());
        let small = SweepConfig { n_per_class: 10, ..SweepConfig::default() };
        assert!(small.validate().is_err());
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = SweepConfig::default();
        let b = SweepConfig { output_dir: "elsewhere".into(), jobs: 3, ..SweepConfig::default() };
        let c = SweepConfig { seed: 1, ..SweepConfig::default() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 12);
    }

    #[test]
    fn experiment_dependent_defaults() {
        let scratch = SweepConfig { experiment: Experiment::NnScratchSweep, ..SweepConfig::default() };
        assert!(scratch.effective_early_stop());
        assert_eq!(scratch.effective_init_scale(), 0.1);
        let forced = SweepConfig { early_stop: Some(false), ..scratch };
        assert!(!forced.effective_early_stop());
    }
}
