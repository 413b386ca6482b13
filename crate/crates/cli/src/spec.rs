//! Run specifications: defaults, config files, flag overrides and manifests.
//!
//! A spec is built as a JSON value in three layers — built-in defaults, then
//! the `--config` file (TOML, or a previously written `manifest.json`), then
//! command-line flags — and only then deserialized and validated.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use hero_dp::data::{
    data_dir_from_env, load_cifar10_split, load_mnist_split, locate_cifar10, locate_mnist, synthetic_digits, Dataset,
    Split, DATA_DIR_ENV,
};
use hero_dp::dp_optim::TrainConfig;
use hero_dp::nn::Architecture;
use hero_dp::numerics::RngState;
use hero_dp::Scalar;

use crate::errors::{DataUnavailable, UsageError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    /// Generated 28x28 digit-like images; needs no files.
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub dataset: DatasetKind,
    /// Root holding the benchmark files; falls back to `HERO_DP_DATA_DIR`.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    /// Use only the first `n` training examples.
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_noise: f64,
    #[serde(default)]
    pub precision: Precision,
}

pub struct LoadedData<T> {
    pub train: Dataset<T>,
    pub test: Dataset<T>,
}

impl DataSpec {
    fn root(&self) -> Option<PathBuf> {
        self.data_dir.clone().or_else(data_dir_from_env)
    }

    pub fn default_arch(&self) -> &'static str {
        match self.dataset {
            DatasetKind::Mnist => "lenet-small",
            DatasetKind::Cifar10 => "cifar-conv",
            DatasetKind::Synthetic => "mlp",
        }
    }

    /// Loads train and test splits; the synthetic generator is seeded from `seed`.
    pub fn load<T: Scalar>(&self, seed: u64) -> Result<LoadedData<T>> {
        let missing = |what: &str| -> anyhow::Error {
            DataUnavailable(format!(
                "{what} files not found; pass --data-dir or set {DATA_DIR_ENV} (searched {})",
                self.root()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "nothing".into())
            ))
            .into()
        };
        let (train, test) = match self.dataset {
            DatasetKind::Mnist => {
                let dir = self
                    .root()
                    .and_then(|r| locate_mnist(&r))
                    .ok_or_else(|| missing("MNIST"))?;
                (
                    load_mnist_split::<T>(&dir, Split::Train)?,
                    load_mnist_split::<T>(&dir, Split::Test)?,
                )
            }
            DatasetKind::Cifar10 => {
                let dir = self
                    .root()
                    .and_then(|r| locate_cifar10(&r))
                    .ok_or_else(|| missing("CIFAR-10"))?;
                load_cifar10_split::<T>(&dir)?
            }
            DatasetKind::Synthetic => {
                let root = RngState::new(seed).derive(&[0x5359_4e54]);
                let train = synthetic_digits::<T>(self.synthetic_train, self.synthetic_noise, &mut root.derive(&[1]))?;
                let test = synthetic_digits::<T>(self.synthetic_test, self.synthetic_noise, &mut root.derive(&[2]))?;
                (
                    train.with_provenance("synthetic-digits-train"),
                    test.with_provenance("synthetic-digits-test"),
                )
            }
        };
        let train = match self.train_limit {
            Some(n) => train.head(n)?,
            None => train,
        };
        let test = match self.test_limit {
            Some(n) => test.head(n)?,
            None => test,
        };
        Ok(LoadedData { train, test })
    }
}

pub fn default_data() -> Value {
    json!({
        "dataset": "synthetic",
        "synthetic_train": 2000,
        "synthetic_test": 500,
        "synthetic_noise": 0.3,
        "precision": "f64",
    })
}

pub fn default_train() -> Value {
    let mut v = serde_json::to_value(TrainConfig::new(
        hero_dp::dp_optim::OptimizerKind::DpHero,
        Architecture::mlp(1, &[], 2),
    ))
    .expect("config serializes");
    v.as_object_mut().expect("object").remove("arch");
    v
}

/// Reads a TOML config or JSON manifest into a JSON value.
pub fn read_config_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    let value: Value = if is_json {
        serde_json::from_str(&text).map_err(|e| UsageError(format!("--config {}: {e}", path.display())))?
    } else {
        let t: toml::Value =
            toml::from_str(&text).map_err(|e| UsageError(format!("--config {}: {e}", path.display())))?;
        serde_json::to_value(t)?
    };
    if !value.is_object() {
        bail!(UsageError(format!(
            "--config {}: expected a table at top level",
            path.display()
        )));
    }
    Ok(value)
}

/// Recursively overlays `top` onto `base`.
pub fn merge(base: &mut Value, top: &Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, t) => *b = t.clone(),
    }
}

pub fn set(section: &mut Value, key: &str, value: impl Serialize) {
    section
        .as_object_mut()
        .expect("section is an object")
        .insert(key.to_string(), serde_json::to_value(value).expect("serializable flag"));
}

/// Replaces a string `arch` with the named preset, or fills in the dataset default.
pub fn resolve_arch(train: &mut Value, default_preset: &str) -> Result<()> {
    let obj = train.as_object_mut().expect("train section is an object");
    let arch = match obj.get("arch") {
        None | Some(Value::Null) => Architecture::preset(default_preset)?,
        Some(Value::String(name)) => Architecture::preset(name).map_err(|e| UsageError(format!("--arch: {e}")))?,
        Some(other) => serde_json::from_value(other.clone()).map_err(|e| UsageError(format!("arch: {e}")))?,
    };
    obj.insert("arch".into(), serde_json::to_value(arch)?);
    Ok(())
}

pub fn section<'a>(root: &'a Value, key: &str) -> Option<&'a Value> {
    root.as_object().and_then(|o| o.get(key))
}

pub fn deserialize<T: serde::de::DeserializeOwned>(value: Value, what: &str) -> Result<T> {
    serde_json::from_value(value).map_err(|e| UsageError(format!("invalid {what} configuration: {e}")).into())
}

/// Flags shared by every command that loads data.
#[derive(Debug, Args, Default)]
pub struct DataArgs {
    /// Dataset to train on.
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetKind>,
    /// Directory holding benchmark files (default: $HERO_DP_DATA_DIR).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Use only the first N training examples.
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Use only the first N test examples.
    #[arg(long)]
    pub test_limit: Option<usize>,
    /// Training examples generated for the synthetic dataset.
    #[arg(long)]
    pub synthetic_size: Option<usize>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
}

impl DataArgs {
    pub fn apply(&self, data: &mut Value) {
        if let Some(v) = self.dataset {
            set(data, "dataset", v);
        }
        if let Some(v) = &self.data_dir {
            set(data, "data_dir", v);
        }
        if let Some(v) = self.train_limit {
            set(data, "train_limit", v);
        }
        if let Some(v) = self.test_limit {
            set(data, "test_limit", v);
        }
        if let Some(v) = self.synthetic_size {
            set(data, "synthetic_train", v);
        }
        if let Some(v) = self.precision {
            set(data, "precision", v);
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

/// Training hyperparameter flags.
#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    /// Architecture preset: mlp, lenet-small or cifar-conv.
    #[arg(long)]
    pub arch: Option<String>,
    /// sgd, dp-sgd or dp-hero.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Noise multiplier.
    #[arg(long, allow_negative_numbers = true)]
    pub sigma: Option<f64>,
    /// Per-example clipping norm.
    #[arg(long, allow_negative_numbers = true)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub lot_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Exact number of steps (overrides --epochs).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Learning rate.
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// paper-max, zcdp-sum or conservative.
    #[arg(long)]
    pub accounting: Option<String>,
    /// layer or model.
    #[arg(long)]
    pub guidance_scope: Option<String>,
    /// Recompute guidance every N steps.
    #[arg(long = "guidance-every-n")]
    pub guidance_every: Option<usize>,
    #[arg(long, value_enum)]
    pub noise_clip_coupling: Option<OnOff>,
    /// Poisson lot sampling with rate lot_size / N.
    #[arg(long)]
    pub poisson: bool,
    /// Evaluate after each of the first 30 steps.
    #[arg(long)]
    pub trace_initial: bool,
    /// Record wall-clock time in the step CSV (makes output non-reproducible).
    #[arg(long)]
    pub timing: bool,
}

fn checked<T: std::str::FromStr>(flag: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| UsageError(format!("--{flag}: {e}")).into())
}

impl TrainArgs {
    pub fn apply(&self, train: &mut Value) -> Result<()> {
        if let Some(v) = &self.arch {
            set(train, "arch", v);
        }
        if let Some(v) = &self.optimizer {
            set(
                train,
                "optimizer",
                checked::<hero_dp::dp_optim::OptimizerKind>("optimizer", v)?,
            );
        }
        let pos = |flag: &str, v: f64, strict: bool| -> Result<f64> {
            let ok = v.is_finite() && if strict { v > 0.0 } else { v >= 0.0 };
            if ok {
                Ok(v)
            } else {
                Err(UsageError(format!(
                    "--{flag} must be {}, got {v}",
                    if strict { "> 0" } else { ">= 0" }
                ))
                .into())
            }
        };
        if let Some(v) = self.sigma {
            set(train, "sigma", pos("sigma", v, false)?);
        }
        if let Some(v) = self.clip {
            set(train, "clip", pos("clip", v, true)?);
        }
        if let Some(v) = self.lot_size {
            if v == 0 {
                bail!(UsageError("--lot-size must be at least 1".into()));
            }
            set(train, "lot_size", v);
        }
        if let Some(v) = self.epochs {
            set(train, "epochs", v);
        }
        if let Some(v) = self.steps {
            set(train, "steps", v);
        }
        if let Some(v) = self.lr {
            set(train, "eta", pos("lr", v, true)?);
        }
        if let Some(v) = self.delta {
            if !(v > 0.0 && v < 1.0) {
                bail!(UsageError(format!("--delta must lie in (0, 1), got {v}")));
            }
            set(train, "delta", v);
        }
        if let Some(v) = self.seed {
            set(train, "seed", v);
        }
        if let Some(v) = &self.accounting {
            set(
                train,
                "accounting",
                checked::<hero_dp::accountant::AccountingMode>("accounting", v)?,
            );
        }
        if let Some(v) = &self.guidance_scope {
            if v != "layer" && v != "model" {
                bail!(UsageError(format!("--guidance-scope must be layer or model, got {v}")));
            }
            set(train, "guidance_scope", v);
        }
        if let Some(v) = self.guidance_every {
            if v == 0 {
                bail!(UsageError("--guidance-every-n must be at least 1".into()));
            }
            set(train, "guidance_every", v);
        }
        if let Some(v) = self.noise_clip_coupling {
            set(train, "noise_clip_coupling", matches!(v, OnOff::On));
        }
        if self.poisson {
            set(train, "sampling", "poisson");
        }
        if self.trace_initial {
            set(train, "trace_initial", true);
        }
        if self.timing {
            set(train, "timing", true);
        }
        Ok(())
    }
}

/// Reproducibility record written next to every run's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub data: DataSpec,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fed: Option<hero_dp::federated::FedConfig>,
    pub seed: u64,
    pub dataset_provenance: Vec<String>,
    pub outputs: Map<String, Value>,
}

pub fn code_version() -> String {
    format!("hero-dp {}", env!("CARGO_PKG_VERSION"))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}
