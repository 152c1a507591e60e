//! `fpgate` command-line front end.
//!
//! Every subcommand writes into a run directory holding the resolved
//! configuration (`config.json`), digests of its inputs (`inputs.json`), a log
//! (`run.log`) and its outputs. The default run directory lives under
//! `$FPGATE_OUT` (or `./runs`).

mod commands;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fpgate::dataio::synth::Preset;
use fpgate::dataio::PayloadFormat;
use fpgate::eval::ExperimentKind;
use fpgate::{EncoderSpec, Variant};
use serde::de::DeserializeOwned;

#[derive(Parser, Debug)]
#[command(name = "fpgate", version, about = "Likelihood gating of detector false positives")]
struct Cli {
    /// Log level for stderr and the run log.
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic TP/FP feature dataset.
    Synth(SynthArgs),
    /// Train a flow (MLE, frozen or finetune variant) on a dataset.
    Train(TrainArgs),
    /// Score every sample of a dataset with a trained model.
    Score(ScoreArgs),
    /// Run a cross-validated experiment and write reports.
    Eval(EvalArgs),
    /// Print the structure and metadata of a model file.
    InspectModel(InspectArgs),
}

#[derive(Args, Debug)]
struct OutArg {
    /// Run directory [default: $FPGATE_OUT/<command>]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// JSON generator spec; flags override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Built-in spec (ignored when --spec is given).
    #[arg(long, value_parser = parse_name::<Preset>, conflicts_with = "hardness")]
    preset: Option<Preset>,
    /// Shorthand for --preset easy|hard.
    #[arg(long, value_parser = ["easy", "hard"])]
    hardness: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Payload encoding.
    #[arg(long, value_parser = parse_name::<PayloadFormat>, default_value = "csv")]
    format: PayloadFormat,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    /// JSON run config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_name::<Variant>)]
    variant: Option<Variant>,
    /// identity | linear | standardize | pca:K | mlp:K[:H]
    #[arg(long, value_parser = parse_encoder)]
    encoder: Option<EncoderSpec>,
    /// Published hyperparameters (32 layers, width 512, lr 1e-5, 100 epochs,
    /// batch 2048, or 32 when finetuning).
    #[arg(long)]
    paper_hparams: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_tp: Option<usize>,
    #[arg(long)]
    batch_fp: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Stratified share of the dataset held out for checkpoint selection.
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// Adds a `reject` column: true iff anomaly_score > threshold.
    #[arg(long)]
    threshold: Option<f64>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// JSON experiment config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Protocol to run when no config file is given.
    #[arg(long, value_parser = parse_name::<ExperimentKind>)]
    experiment: Option<ExperimentKind>,
    /// Built-in synthetic dataset.
    #[arg(long, value_parser = parse_name::<Preset>, conflicts_with_all = ["hardness", "data"])]
    preset: Option<Preset>,
    /// Shorthand for --preset easy|hard.
    #[arg(long, value_parser = ["easy", "hard"], conflicts_with = "data")]
    hardness: Option<String>,
    /// Dataset manifest instead of a synthetic preset.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', value_parser = parse_name::<Variant>)]
    variants: Option<Vec<Variant>>,
    /// FP sampling ratios, comma separated.
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    paper_hparams: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for fold-level parallelism [default: 1].
    #[arg(long)]
    jobs: Option<usize>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct InspectArgs {
    model: PathBuf,
}

/// Parses a snake_case enum name through its serde representation.
fn parse_name<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_encoder(s: &str) -> Result<EncoderSpec, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |p: &str| p.parse::<usize>().map_err(|_| format!("bad number {p:?} in encoder {s:?}"));
    match parts.as_slice() {
        ["identity"] => Ok(EncoderSpec::Identity),
        ["linear"] => Ok(EncoderSpec::Linear),
        ["standardize"] => Ok(EncoderSpec::Standardize),
        ["pca", k] => Ok(EncoderSpec::Pca { dim: num(k)? }),
        ["mlp", k] => Ok(EncoderSpec::Mlp { dim: num(k)?, hidden: None }),
        ["mlp", k, h] => Ok(EncoderSpec::Mlp {
            dim: num(k)?,
            hidden: Some(num(h)?),
        }),
        _ => Err(format!(
            "unknown encoder {s:?}; expected identity, linear, standardize, pca:K or mlp:K[:H]"
        )),
    }
}

fn hardness_preset(h: Option<&str>) -> Option<Preset> {
    h.map(|h| if h == "easy" { Preset::Easy } else { Preset::Hard })
}

/// 2 configuration, 3 data or I/O, 4 numeric failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    use fpgate::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::InvalidArgument(_) => 2,
                E::Numeric(_) => 4,
                E::Shape { .. } | E::Data(_) | E::Io(_) | E::Json(_) | E::Csv(_) => 3,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = cli.log_level;
    let res = match cli.command {
        Command::Synth(a) => commands::synth(a, level),
        Command::Train(a) => commands::train(a, level),
        Command::Score(a) => commands::score(a, level),
        Command::Eval(a) => commands::eval(a, level),
        Command::InspectModel(a) => commands::inspect(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if log::max_level() == log::LevelFilter::Off {
                eprintln!("error: {e:#}");
            } else {
                log::error!("{e:#}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
