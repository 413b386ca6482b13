use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;
use serde_json::{json, Map, Value};

use hero_dp::federated::{run_federation, FedConfig, RoundRow};
use hero_dp::io::{save_model, write_csv};
use hero_dp::numerics::RngState;
use hero_dp::Scalar;

use crate::commands::train::{check_compat, resolve};
use crate::spec::{
    code_version, deserialize, merge, section, set, write_json, DataArgs, DataSpec, Precision, RunManifest, TrainArgs,
};

#[derive(Debug, Args)]
pub struct FedsimCmd {
    /// TOML config or a manifest.json from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of clients K.
    #[arg(long)]
    pub clients: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Clients sampled per round (default: all).
    #[arg(long)]
    pub clients_per_round: Option<usize>,
    #[arg(long)]
    pub local_epochs: Option<usize>,
    /// Dirichlet concentration of the label partition.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Fraction of the training data shared with every client.
    #[arg(long)]
    pub shared_fraction: Option<f64>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Output directory.
    #[arg(long, default_value = "runs/fedsim")]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct ClientPrivacy {
    client: usize,
    examples: usize,
    steps: usize,
    epsilon: Option<f64>,
}

pub fn run(cmd: &FedsimCmd) -> Result<()> {
    let (data_spec, train, file) = resolve(cmd.config.as_deref(), &cmd.data, &cmd.train)?;
    let mut fed = json!({"num_clients": 4, "rounds": 5, "local_epochs": 1, "shared_fraction": 0.0, "alpha": 1e6});
    if let Some(f) = file.as_ref().and_then(|f| section(f, "fed")) {
        merge(&mut fed, f);
    }
    let flags: [(&str, Option<Value>); 6] = [
        ("num_clients", cmd.clients.map(Value::from)),
        ("rounds", cmd.rounds.map(Value::from)),
        ("clients_per_round", cmd.clients_per_round.map(Value::from)),
        ("local_epochs", cmd.local_epochs.map(Value::from)),
        ("alpha", cmd.alpha.map(Value::from)),
        ("shared_fraction", cmd.shared_fraction.map(Value::from)),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            set(&mut fed, k, v);
        }
    }
    if section(&fed, "clients_per_round").is_none() {
        let k = section(&fed, "num_clients").cloned().unwrap_or(Value::Null);
        set(&mut fed, "clients_per_round", k);
    }
    set(&mut fed, "train", train);
    let cfg: FedConfig = deserialize(fed, "federation")?;
    cfg.validate()?;
    match data_spec.precision {
        Precision::F32 => run_typed::<f32>(cmd, &data_spec, &cfg),
        Precision::F64 => run_typed::<f64>(cmd, &data_spec, &cfg),
    }
}

fn run_typed<T: Scalar>(cmd: &FedsimCmd, data_spec: &DataSpec, cfg: &FedConfig) -> Result<()> {
    let data = data_spec.load::<T>(cfg.train.seed)?;
    check_compat(&cfg.train, &data.train)?;

    std::fs::create_dir_all(&cmd.out).with_context(|| format!("creating {}", cmd.out.display()))?;
    let mut outputs = Map::new();
    for (k, f) in [
        ("rounds", "rounds.csv"),
        ("model", "model.hdpm"),
        ("privacy", "privacy.json"),
    ] {
        outputs.insert(k.into(), json!(cmd.out.join(f)));
    }
    let manifest = RunManifest {
        command: "fedsim".into(),
        code_version: code_version(),
        data: data_spec.clone(),
        train: None,
        fed: Some(cfg.clone()),
        seed: cfg.train.seed,
        dataset_provenance: vec![data.train.provenance().into(), data.test.provenance().into()],
        outputs,
    };
    write_json(&cmd.out.join("manifest.json"), &manifest)?;

    let outcome = run_federation(cfg, &data.train, Some(&data.test), &RngState::new(cfg.train.seed))?;
    let rows: Vec<RoundRow> = outcome.rounds.iter().map(|r| r.to_row()).collect();
    write_csv(&rows, cmd.out.join("rounds.csv"))?;
    save_model(&outcome.model, cmd.out.join("model.hdpm"))?;
    let clients: Vec<ClientPrivacy> = outcome
        .ledgers
        .iter()
        .enumerate()
        .map(|(k, l)| ClientPrivacy {
            client: k,
            examples: outcome.client_sizes[k],
            steps: l.len(),
            epsilon: l.epsilon().ok(),
        })
        .collect();
    write_json(&cmd.out.join("privacy.json"), &clients)?;

    println!(
        "federation: {} clients, {} rounds, alpha {}",
        cfg.num_clients, cfg.rounds, cfg.alpha
    );
    if let Some(acc) = outcome.rounds.last().and_then(|r| r.accuracy) {
        println!("global test accuracy after round {}: {acc:.4}", cfg.rounds);
    }
    println!(
        "{:<8} {:>9} {:>7} {:>14}",
        "client",
        "examples",
        "steps",
        cfg.train.accounting.name()
    );
    for c in &clients {
        let eps = c
            .epsilon
            .map(|e| format!("{e:.4}"))
            .unwrap_or_else(|| "unbounded".into());
        println!("{:<8} {:>9} {:>7} {:>14}", c.client, c.examples, c.steps, eps);
    }
    println!("outputs written to {}", cmd.out.display());
    Ok(())
}
