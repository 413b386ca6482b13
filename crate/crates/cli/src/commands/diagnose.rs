use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde_json::{json, Value};

use hero_dp::diagnostics::{diagnose, BinaryProbe, DiagnoseConfig, DiagnosticReport};
use hero_dp::guidance::GuidanceScope;
use hero_dp::io::{load_model, write_csv};
use hero_dp::nn::{init_model, Architecture, ModelState};
use hero_dp::numerics::RngState;
use hero_dp::Scalar;

use crate::errors::UsageError;
use crate::spec::{default_data, deserialize, write_json, DataArgs, DataSpec, Precision};

#[derive(Debug, Args)]
pub struct DiagnoseCmd {
    /// Model file written by `train` or `fedsim`.
    #[arg(long, conflicts_with = "fresh")]
    pub model: Option<PathBuf>,
    /// Diagnose a freshly initialized model instead.
    #[arg(long)]
    pub fresh: bool,
    /// Architecture preset for --fresh (default: the dataset's).
    #[arg(long)]
    pub arch: Option<String>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub clip: f64,
    #[arg(long, default_value_t = 64)]
    pub lot_size: usize,
    /// layer or model.
    #[arg(long, default_value = "layer")]
    pub guidance_scope: String,
    #[arg(long, default_value_t = 1000)]
    pub probe_draws: usize,
    #[arg(long, default_value_t = 200)]
    pub alignment_draws: usize,
    /// Directory for diagnostics.csv and report.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

impl DiagnoseCmd {
    fn config(&self) -> Result<DiagnoseConfig> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            bail!(UsageError(format!("--sigma must be >= 0, got {}", self.sigma)));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            bail!(UsageError(format!("--clip must be > 0, got {}", self.clip)));
        }
        if self.lot_size == 0 {
            bail!(UsageError("--lot-size must be at least 1".into()));
        }
        if self.probe_draws < 2 || self.alignment_draws < 2 {
            bail!(UsageError(
                "--probe-draws and --alignment-draws must be at least 2".into()
            ));
        }
        let scope: GuidanceScope = serde_json::from_value(json!(self.guidance_scope)).map_err(|_| {
            UsageError(format!(
                "--guidance-scope must be layer or model, got {}",
                self.guidance_scope
            ))
        })?;
        Ok(DiagnoseConfig {
            sigma: self.sigma,
            clip: self.clip,
            lot_size: self.lot_size,
            scope,
            probe_draws: self.probe_draws,
            alignment_draws: self.alignment_draws,
        })
    }
}

pub fn run(cmd: &DiagnoseCmd) -> Result<()> {
    if cmd.model.is_none() == !cmd.fresh {
        bail!(UsageError("pass exactly one of --model FILE or --fresh".into()));
    }
    let cfg = cmd.config()?;
    let mut data: Value = default_data();
    cmd.data.apply(&mut data);
    let data_spec: DataSpec = deserialize(data, "data")?;
    match data_spec.precision {
        Precision::F32 => run_typed::<f32>(cmd, &data_spec, &cfg),
        Precision::F64 => run_typed::<f64>(cmd, &data_spec, &cfg),
    }
}

fn run_typed<T: Scalar>(cmd: &DiagnoseCmd, data_spec: &DataSpec, cfg: &DiagnoseConfig) -> Result<()> {
    let root = RngState::new(cmd.seed);
    let model: ModelState<T> = match &cmd.model {
        Some(path) => load_model(path).with_context(|| format!("loading model {}", path.display()))?,
        None => {
            let name = cmd.arch.as_deref().unwrap_or(data_spec.default_arch());
            let arch = Architecture::preset(name).map_err(|e| UsageError(format!("--arch: {e}")))?;
            init_model(&arch, &mut root.derive(&[1]))?
        }
    };
    let data = data_spec.load::<T>(cmd.seed)?;
    if model.arch().input_len() != data.train.input_dim() || model.num_classes() != data.train.num_classes() {
        bail!(UsageError(format!(
            "model expects {} features and {} classes, but dataset {} has {} and {}",
            model.arch().input_len(),
            model.num_classes(),
            data.train.provenance(),
            data.train.input_dim(),
            data.train.num_classes()
        )));
    }
    let probe = BinaryProbe::from_dataset(&data.train, 0, 1, 500)?;
    let report = diagnose(&model, &data.train, &probe, cfg, 0, &root.derive(&[4]))?;

    if let Some(out) = &cmd.out {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        write_csv(&report.rows(), out.join("diagnostics.csv"))?;
        write_json(&out.join("report.json"), &report)?;
    }
    if cmd.json {
        println!("{}", serde_json::to_string(&report)?);
    } else {
        print_report(&report);
    }
    Ok(())
}

fn print_report(r: &DiagnosticReport) {
    println!("utility gap (guided):      {:.6}", r.utility_gap);
    println!("utility gap (isotropic):   {:.6}", r.utility_gap_isotropic);
    println!("probe variance isotropic:  {:.6}", r.linear_perturb_var_isotropic);
    println!("probe variance orthogonal: {:.6}", r.linear_perturb_var_orthogonal);
    println!("{:<16} {:>12} {:>10}", "layer", "E|cos|", "stderr");
    for a in &r.alignment {
        let flag = if a.degenerate { " (degenerate)" } else { "" };
        println!(
            "{:<16} {:>12.6} {:>10.6}{flag}",
            a.layer, a.mean_abs_cosine, a.std_error
        );
    }
}
