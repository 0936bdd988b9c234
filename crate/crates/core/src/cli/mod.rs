//! Batch entry points: `gen-synth`, `train`, `eval` and `inspect`.

mod config;

pub use config::{RunConfig, KEYS, SCHEDULE};

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::backbone::BackboneParams;
use crate::data::{gen_synthetic, Dataset, SyntheticSpec};
use crate::diagnostics::{self, RankReport, DEFAULT_EPSILON};
use crate::model::{Model, Phi};
use crate::objective::{evaluate, train_loop, Evaluation, METRICS_HEADER};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "tcpa",
    version,
    about = "Prompt tuning over a frozen ViT at desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset of class templates plus noise.
    GenSynth(GenSynthArgs),
    /// Train Φ and write weights, metrics and the resolved config.
    Train(ConfigArgs),
    /// Report accuracy of trained weights on the configured dataset.
    Eval(EvalArgs),
    /// Export attention maps, masks, ε-ranks and features for one sample.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key after the file is read. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), &self.set)
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenSynthArgs {
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 64)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0.05, allow_negative_numbers = true)]
    pub noise: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Destination dataset file.
    #[arg(long)]
    pub out: PathBuf,
    /// Image and patch extents are taken from this configuration.
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Φ weights written by `train`.
    #[arg(long)]
    pub weights: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub weights: PathBuf,
    /// Dataset index of the inspected image.
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    /// Relative singular-value threshold.
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Output directory; a fresh run directory when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Failures print one line to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Numerics(_) => EXIT_USAGE,
        Error::Io { .. } | Error::Format(_) => EXIT_IO,
        Error::NonFinite(_) => EXIT_NUMERIC,
    }
}

fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::GenSynth(a) => {
            let data = cmd_gen_synth(a)?;
            println!(
                "{}",
                json!({"command": "gen-synth", "out": a.out.display().to_string(), "samples": data.len(), "classes": data.num_classes})
            );
        }
        Command::Train(a) => {
            let report = cmd_train(&a.resolve()?, true)?;
            println!(
                "{}",
                json!({
                    "command": "train",
                    "run_dir": report.run_dir.display().to_string(),
                    "steps": report.steps,
                    "accuracy": report.evaluation.accuracy,
                    "mean_loss": report.evaluation.mean_loss,
                })
            );
        }
        Command::Eval(a) => {
            let ev = cmd_eval(&a.config.resolve()?, &a.weights)?;
            let correct = (ev.accuracy * ev.predictions.len() as f64).round() as usize;
            println!(
                "accuracy {:.4} ({correct}/{})",
                ev.accuracy,
                ev.predictions.len()
            );
            println!(
                "{}",
                json!({"command": "eval", "accuracy": ev.accuracy, "mean_loss": ev.mean_loss, "samples": ev.predictions.len(), "correct": correct})
            );
        }
        Command::Inspect(a) => {
            let r = cmd_inspect(
                &a.config.resolve()?,
                &a.weights,
                a.sample,
                a.epsilon,
                a.out.as_deref(),
            )?;
            let ranks: Vec<_> = r
                .reports
                .iter()
                .map(|x| json!({"layer": x.layer, "head": x.head, "rank": x.epsilon_rank, "sigma_max": x.sigma_max()}))
                .collect();
            println!(
                "{}",
                json!({"command": "inspect", "out": r.out_dir.display().to_string(), "masks_verified": r.masks_verified, "ranks": ranks})
            );
        }
    }
    Ok(())
}

/// Generates and saves the dataset described by the flags.
pub fn cmd_gen_synth(args: &GenSynthArgs) -> Result<Dataset> {
    let m = args.config.resolve()?.model;
    let spec = SyntheticSpec {
        classes: args.classes,
        samples_per_class: args.per_class,
        noise_std: args.noise,
        seed: args.seed,
        image_h: m.image_h,
        image_w: m.image_w,
        channels: m.channels,
        patch_h: m.patch_h,
        patch_w: m.patch_w,
    };
    let data = gen_synthetic(&spec)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    data.save(&args.out)?;
    Ok(data)
}

/// The configured backbone: loaded from `backbone` or drawn from
/// `backbone_seed`.
pub fn build_model(config: &RunConfig) -> Result<Model> {
    let backbone = match &config.backbone {
        Some(path) => BackboneParams::load(path, &config.model)?,
        None => BackboneParams::init(&config.model, config.backbone_seed),
    };
    Model::new(
        config.model.clone(),
        config.tcpa.clone(),
        config.mode,
        backbone,
    )
}

fn load_dataset(config: &RunConfig, model: &Model) -> Result<Dataset> {
    let data = Dataset::load(config.dataset_path()?)?;
    data.check_model(&model.config)?;
    Ok(data)
}

/// `output_dir/<UTC timestamp>-seed<seed>`, suffixed when it already exists.
pub fn fresh_run_dir(output_dir: &Path, seed: u64) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
    let base = format!("{stamp}-seed{seed}");
    fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    for n in 0.. {
        let name = if n == 0 {
            base.clone()
        } else {
            format!("{base}-{n}")
        };
        let dir = output_dir.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!("run directory suffixes exhausted")
}

pub const CONFIG_ECHO: &str = "config.resolved";
pub const BACKBONE_FILE: &str = "backbone.tcpw";
pub const PHI_FILE: &str = "phi.tcpw";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub run_dir: PathBuf,
    pub steps: u64,
    /// Training-set evaluation of the final Φ.
    pub evaluation: Evaluation,
}

/// Trains Φ from its seeded initialization and writes the run directory.
/// With `progress`, one line per epoch goes to stderr.
pub fn cmd_train(config: &RunConfig, progress: bool) -> Result<TrainReport> {
    let model = build_model(config)?;
    let data = load_dataset(config, &model)?;
    let run_dir = fresh_run_dir(&config.output_dir, config.train.seed)?;
    let echo = run_dir.join(CONFIG_ECHO);
    fs::write(&echo, config.echo()).map_err(|e| Error::io(&echo, e))?;
    model.backbone.save(&run_dir.join(BACKBONE_FILE))?;

    let phi = Phi::init(&model, data.num_classes, config.train.seed);
    let epochs = config.train.epochs;
    let mut epoch_loss = (0.0, 0usize);
    let out = train_loop(&model, phi, &data, &config.train, |m| {
        epoch_loss.0 += m.loss;
        epoch_loss.1 += 1;
        let per_epoch = data.len().div_ceil(config.train.batch_size);
        if progress && epoch_loss.1 == per_epoch {
            eprintln!(
                "epoch {}/{epochs} mean loss {:.5}",
                m.epoch + 1,
                epoch_loss.0 / per_epoch as f64
            );
            epoch_loss = (0.0, 0);
        }
    })?;

    let metrics = run_dir.join(METRICS_FILE);
    let mut csv = String::with_capacity(64 * (out.log.len() + 1));
    csv.push_str(METRICS_HEADER);
    csv.push('\n');
    for m in &out.log {
        csv.push_str(&m.csv_row());
        csv.push('\n');
    }
    fs::write(&metrics, csv).map_err(|e| Error::io(&metrics, e))?;
    out.state.phi.save(&run_dir.join(PHI_FILE))?;
    let evaluation = evaluate(&model, &out.state.phi, &data, config.train.execution)?;
    Ok(TrainReport {
        run_dir,
        steps: out.state.step,
        evaluation,
    })
}

pub fn cmd_eval(config: &RunConfig, weights: &Path) -> Result<Evaluation> {
    let model = build_model(config)?;
    let data = load_dataset(config, &model)?;
    let phi = Phi::load(weights, &model)?;
    if phi.num_classes() != data.num_classes {
        return Err(Error::Config(format!(
            "weights have {} classes, dataset {}",
            phi.num_classes(),
            data.num_classes
        )));
    }
    evaluate(&model, &phi, &data, config.train.execution)
}

pub const RANK_FILE: &str = "ranks.csv";
pub const FEATURE_FILE: &str = "features.csv";

#[derive(Debug, Clone)]
pub struct InspectReport {
    pub out_dir: PathBuf,
    pub reports: Vec<RankReport>,
    /// Layers whose assembled mask passed the verifier.
    pub masks_verified: usize,
}

/// Captures one sample, verifies every assembled mask and writes attention
/// and mask CSVs, the slot layout, the rank report and the feature dump.
pub fn cmd_inspect(
    config: &RunConfig,
    weights: &Path,
    sample: usize,
    epsilon: f64,
    out: Option<&Path>,
) -> Result<InspectReport> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::Config(format!(
            "epsilon must be a finite non-negative number, got {epsilon}"
        )));
    }
    let model = build_model(config)?;
    let data = load_dataset(config, &model)?;
    if sample >= data.len() {
        return Err(Error::Config(format!(
            "sample {sample} is outside the dataset of {}",
            data.len()
        )));
    }
    let phi = Phi::load(weights, &model)?;
    let records = model.capture(&phi, &data.image(sample))?;
    let mut masks_verified = 0;
    for r in &records {
        if let Some(mask) = &r.mask {
            mask.verify(config.tcpa.cls_top_k, config.tcpa.img_top_k)?;
            masks_verified += 1;
        }
    }
    let out_dir = match out {
        Some(dir) => dir.to_path_buf(),
        None => fresh_run_dir(&config.output_dir, config.train.seed)?,
    };
    diagnostics::export_attention(&records, &out_dir)?;
    let reports = diagnostics::rank_reports(&records, epsilon)?;
    diagnostics::write_rank_csv(&out_dir.join(RANK_FILE), &reports)?;
    diagnostics::export_features(
        &out_dir.join(FEATURE_FILE),
        &model,
        &phi,
        &data,
        config.train.execution,
    )?;
    let echo = out_dir.join(CONFIG_ECHO);
    fs::write(&echo, config.echo()).map_err(|e| Error::io(&echo, e))?;
    Ok(InspectReport {
        out_dir,
        reports,
        masks_verified,
    })
}

#[cfg(test)]
mod tests;
