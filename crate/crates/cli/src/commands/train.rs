use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde_json::{json, Map, Value};

use hero_dp::accountant::PrivacyLedger;
use hero_dp::data::Dataset;
use hero_dp::dp_optim::{train, TrainConfig};
use hero_dp::io::{save_model, write_csv};
use hero_dp::numerics::RngState;
use hero_dp::Scalar;

use crate::commands::print_privacy;
use crate::errors::UsageError;
use crate::spec::{
    code_version, default_data, default_train, deserialize, merge, read_config_file, resolve_arch, section, write_json,
    DataArgs, DataSpec, Precision, RunManifest, TrainArgs,
};

#[derive(Debug, Args)]
pub struct TrainCmd {
    /// TOML config or a manifest.json from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Output directory.
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
}

/// Layers defaults, the config file and flags into resolved data and training specs.
pub fn resolve(
    config: Option<&Path>,
    data_args: &DataArgs,
    train_args: &TrainArgs,
) -> Result<(DataSpec, Value, Option<Value>)> {
    let file = config.map(read_config_file).transpose()?;
    let mut data = default_data();
    if let Some(d) = file.as_ref().and_then(|f| section(f, "data")) {
        merge(&mut data, d);
    }
    data_args.apply(&mut data);
    let data_spec: DataSpec = deserialize(data, "data")?;

    let mut train = default_train();
    if let Some(t) = file.as_ref().and_then(|f| section(f, "train")) {
        merge(&mut train, t);
    }
    if let Some(t) = file
        .as_ref()
        .and_then(|f| section(f, "fed"))
        .and_then(|f| section(f, "train"))
    {
        merge(&mut train, t);
    }
    train_args.apply(&mut train)?;
    resolve_arch(&mut train, data_spec.default_arch())?;
    Ok((data_spec, train, file))
}

pub fn check_compat<T: Scalar>(cfg: &TrainConfig, data: &Dataset<T>) -> Result<()> {
    if cfg.arch.input_len() != data.input_dim() || cfg.arch.num_classes != data.num_classes() {
        anyhow::bail!(UsageError(format!(
            "--arch expects {} features and {} classes, but dataset {} has {} and {}",
            cfg.arch.input_len(),
            cfg.arch.num_classes,
            data.provenance(),
            data.input_dim(),
            data.num_classes()
        )));
    }
    Ok(())
}

pub fn run(cmd: &TrainCmd) -> Result<()> {
    let (data_spec, train, _) = resolve(cmd.config.as_deref(), &cmd.data, &cmd.train)?;
    let cfg: TrainConfig = deserialize(train, "train")?;
    cfg.validate()?;
    match data_spec.precision {
        Precision::F32 => run_typed::<f32>(cmd, &data_spec, &cfg),
        Precision::F64 => run_typed::<f64>(cmd, &data_spec, &cfg),
    }
}

fn run_typed<T: Scalar>(cmd: &TrainCmd, data_spec: &DataSpec, cfg: &TrainConfig) -> Result<()> {
    let data = data_spec.load::<T>(cfg.seed)?;
    check_compat(cfg, &data.train)?;

    std::fs::create_dir_all(&cmd.out).with_context(|| format!("creating {}", cmd.out.display()))?;
    let mut outputs = Map::new();
    for (k, f) in [
        ("steps", "steps.csv"),
        ("model", "model.hdpm"),
        ("privacy", "privacy.json"),
    ] {
        outputs.insert(k.into(), json!(cmd.out.join(f)));
    }
    let manifest = RunManifest {
        command: "train".into(),
        code_version: code_version(),
        data: data_spec.clone(),
        train: Some(cfg.clone()),
        fed: None,
        seed: cfg.seed,
        dataset_provenance: vec![data.train.provenance().into(), data.test.provenance().into()],
        outputs,
    };
    write_json(&cmd.out.join("manifest.json"), &manifest)?;

    let outcome = train(cfg, &data.train, Some(&data.test), &RngState::new(cfg.seed))?;
    write_csv(&outcome.records, cmd.out.join("steps.csv"))?;
    save_model(&outcome.model, cmd.out.join("model.hdpm"))?;
    write_json(&cmd.out.join("privacy.json"), &outcome.ledger.summaries())?;

    println!(
        "trained {} for {} steps on {} ({} examples)",
        cfg.optimizer.name(),
        outcome.records.len(),
        data.train.provenance(),
        data.train.len()
    );
    if let Some(last) = outcome.evals.last() {
        println!("test accuracy after epoch {:.2}: {:.4}", last.epoch, last.accuracy);
    }
    report_ledger(&outcome.ledger);
    println!("outputs written to {}", cmd.out.display());
    Ok(())
}

pub fn report_ledger(ledger: &PrivacyLedger) {
    if ledger.is_empty() {
        println!("privacy: no steps recorded");
    } else {
        print_privacy(&ledger.summaries(), ledger.delta);
    }
}
