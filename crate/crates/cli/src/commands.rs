use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fpgate::dataio::synth::{synth_generate, Preset, SynthSpec};
use fpgate::dataio::{load_dataset, save_dataset, sha256_hex, PayloadFormat};
use fpgate::eval::harness::derive_seed;
use fpgate::eval::{
    holdout_split, run_experiment, write_outputs, DatasetSource, ExperimentConfig, ExperimentReport, FlowSettings,
    RunOptions,
};
use fpgate::model::MODEL_FORMAT_VERSION;
use fpgate::{
    train as train_flow, EncoderSpec, Error, FlowModel, ModelMetadata, Parameterized, Pipeline, TrainConfig, TrainSet,
    ValidationSet, Variant,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::rundir::{self, Inputs, RunDir};
use crate::{hardness_preset, EvalArgs, InspectArgs, ScoreArgs, SynthArgs, TrainArgs};

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?)
}

fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path).with_context(|| format!("resolving {}", path.display()))
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

#[derive(Serialize)]
struct SynthRun {
    spec: SynthSpec,
    format: PayloadFormat,
}

pub fn synth(a: SynthArgs, level: log::LevelFilter) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => read_config::<SynthSpec>(p)?,
        None => {
            let preset = a.preset.or(hardness_preset(a.hardness.as_deref())).unwrap_or(Preset::Default);
            SynthSpec::preset(preset, 0)
        }
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let dir = RunDir::open(rundir::resolve(a.out.out, "synth"), level)?;
    let mut inputs = Inputs::default();
    if let Some(p) = &a.spec {
        inputs.file(p)?;
    }
    dir.write_json("config.json", &SynthRun {
        spec: spec.clone(),
        format: a.format,
    })?;
    let ds = synth_generate(&spec)?;
    inputs.dataset(ds.content_digest());
    dir.write_inputs(&inputs)?;
    let manifest = dir.join("dataset.json");
    save_dataset(&ds, &manifest, a.format)?;
    log::info!("wrote {} samples to {}", ds.len(), manifest.display());
    Ok(())
}

/// `train` config file. `paper_hparams` picks the defaults for absent `train`
/// and `flow` sections.
#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    data: Option<PathBuf>,
    variant: Option<Variant>,
    encoder: Option<EncoderSpec>,
    paper_hparams: Option<bool>,
    flow: Option<FlowSettings>,
    train: Option<TrainConfig>,
    val_fraction: Option<f64>,
}

#[derive(Serialize)]
struct TrainRun {
    data: PathBuf,
    variant: Variant,
    encoder: EncoderSpec,
    paper_hparams: bool,
    flow: FlowSettings,
    train: TrainConfig,
    val_fraction: f64,
}

fn paper_flow() -> FlowSettings {
    FlowSettings {
        layers: 32,
        hidden: Some(512),
        ..FlowSettings::default()
    }
}

fn resolve_train(a: &TrainArgs) -> Result<TrainRun> {
    let (file, base) = match &a.config {
        Some(p) => (read_config::<TrainFile>(p)?, config_dir(p)),
        None => (TrainFile::default(), PathBuf::new()),
    };
    let data = match (&a.data, &file.data) {
        (Some(d), _) => absolute(d)?,
        (None, Some(d)) => absolute(&base.join(d))?,
        (None, None) => return Err(Error::Config("no dataset: pass --data or set `data` in the config".into()).into()),
    };
    let variant = a
        .variant
        .or(file.variant)
        .or(file.train.as_ref().map(|t| t.variant))
        .unwrap_or(Variant::Mle);
    let file_paper = file.paper_hparams.unwrap_or(false);
    let mut train = if a.paper_hparams {
        TrainConfig::paper(variant)
    } else if let Some(t) = file.train {
        t
    } else if file_paper {
        TrainConfig::paper(variant)
    } else {
        TrainConfig::default()
    };
    let mut flow = if a.paper_hparams {
        paper_flow()
    } else if let Some(f) = file.flow {
        f
    } else if file_paper {
        paper_flow()
    } else {
        FlowSettings::default()
    };
    train.variant = variant;
    if let Some(v) = a.epochs {
        train.epochs = v;
    }
    if let Some(v) = a.lr {
        train.lr = v;
    }
    if let Some(v) = a.batch_tp {
        train.batch_tp = v;
    }
    if let Some(v) = a.batch_fp {
        train.batch_fp = v;
    }
    if let Some(v) = a.seed {
        train.seed = v;
    }
    if let Some(v) = a.layers {
        flow.layers = v;
    }
    if let Some(v) = a.hidden {
        flow.hidden = Some(v);
    }
    let mut encoder = a.encoder.clone().or(file.encoder).unwrap_or(EncoderSpec::Standardize);
    if variant.trains_encoder() {
        encoder = encoder.trainable_form();
    }
    let val_fraction = a.val_fraction.or(file.val_fraction).unwrap_or(0.125);
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("val_fraction must be in [0, 1), got {val_fraction}")).into());
    }
    train.validate()?;
    Ok(TrainRun {
        data,
        variant,
        encoder,
        paper_hparams: a.paper_hparams || file_paper,
        flow,
        train,
        val_fraction,
    })
}

pub fn train(a: TrainArgs, level: log::LevelFilter) -> Result<()> {
    let run = resolve_train(&a)?;
    let dir = RunDir::open(rundir::resolve(a.out.out, "train"), level)?;
    dir.write_json("config.json", &run)?;
    let ds = load_dataset(&run.data)?;
    let mut inputs = Inputs::default();
    inputs.file(&run.data)?;
    inputs.dataset(ds.content_digest());
    dir.write_inputs(&inputs)?;

    let seed = run.train.seed;
    let (train_idx, val_idx) = holdout_split(&ds, run.val_fraction, derive_seed(seed, 7))?;
    let tp_idx: Vec<usize> = train_idx.iter().copied().filter(|&i| !ds.samples()[i].label.is_fp()).collect();
    if tp_idx.is_empty() {
        return Err(Error::Data("training split has no TP samples".into()).into());
    }
    let encoder = run.encoder.build::<f64>(&ds.features(&tp_idx), derive_seed(seed, 11))?;
    let flow_cfg = run.flow.config(encoder.out_dim(), derive_seed(seed, 12));
    let flow = FlowModel::new(&flow_cfg)?;
    let data = TrainSet::<f64>::from_dataset(&ds, &train_idx)?;
    let val = ValidationSet::<f64>::from_dataset(&ds, &val_idx);
    log::info!(
        "training {} on {} TP / {} FP, validating on {} samples",
        run.variant.as_str(),
        data.n_tp(),
        data.n_fp(),
        val_idx.len()
    );
    let out = train_flow(encoder, flow, &data, (!val_idx.is_empty()).then_some(&val), &run.train)?;
    log::info!("best epoch {} (epsilon {:?})", out.best_epoch, out.epsilon);

    out.model.save(&dir.join("model.fpg"))?;
    ModelMetadata {
        format_version: MODEL_FORMAT_VERSION,
        encoder: run.encoder.clone(),
        flow: flow_cfg,
        train: run.train.clone(),
        epsilon: out.epsilon,
        best_epoch: out.best_epoch,
        dataset_digest: ds.content_digest(),
    }
    .save(&dir.join("model.json"))?;
    fs::write(dir.join("trace.csv"), out.trace.to_csv())?;
    Ok(())
}

#[derive(Serialize)]
struct ScoreRun<'a> {
    model: &'a Path,
    data: &'a Path,
    threshold: Option<f64>,
}

pub fn score(a: ScoreArgs, level: log::LevelFilter) -> Result<()> {
    if a.threshold.is_some_and(|t| !t.is_finite()) {
        return Err(Error::Config("threshold must be finite".into()).into());
    }
    let model_path = absolute(&a.model)?;
    let data_path = absolute(&a.data)?;
    let dir = RunDir::open(rundir::resolve(a.out.out, "score"), level)?;
    dir.write_json("config.json", &ScoreRun {
        model: &model_path,
        data: &data_path,
        threshold: a.threshold,
    })?;
    let model = Pipeline::<f64>::load(&model_path)?;
    let ds = load_dataset(&data_path)?;
    let mut inputs = Inputs::default();
    inputs.file(&model_path)?;
    inputs.file(&data_path)?;
    inputs.dataset(ds.content_digest());
    dir.write_inputs(&inputs)?;

    let mut idx: Vec<usize> = (0..ds.len()).collect();
    ds.sort_by_id(&mut idx);
    let ll = model.log_likelihood_batch(&ds.features(&idx))?;
    if !ll.flagged.is_empty() {
        log::warn!("{} samples have a non-finite log-likelihood; scored as +inf", ll.flagged.len());
    }
    let mut out = String::from("id,log_likelihood,anomaly_score");
    out.push_str(if a.threshold.is_some() { ",reject\n" } else { "\n" });
    for (&i, &v) in idx.iter().zip(&ll.values) {
        let s = if v.is_finite() { -v } else { f64::INFINITY };
        let _ = write!(out, "{},{v},{s}", ds.samples()[i].id);
        if let Some(t) = a.threshold {
            let _ = write!(out, ",{}", s > t);
        }
        out.push('\n');
    }
    let path = dir.join("scores.csv");
    fs::write(&path, out).with_context(|| format!("writing {}", path.display()))?;
    log::info!("scored {} samples into {}", ds.len(), path.display());
    Ok(())
}

fn resolve_eval(a: &EvalArgs) -> Result<ExperimentConfig> {
    let preset = a.preset.or(hardness_preset(a.hardness.as_deref()));
    let mut cfg = match (&a.config, a.experiment) {
        (Some(p), kind) => {
            let mut cfg: ExperimentConfig = read_config(p)?;
            if let DatasetSource::Manifest { path } = &cfg.dataset {
                cfg.dataset = DatasetSource::Manifest {
                    path: absolute(&config_dir(p).join(path))?,
                };
            }
            if let Some(k) = kind {
                cfg.experiment = k;
            }
            if let Some(pr) = preset {
                cfg.dataset = DatasetSource::Preset { preset: pr, seed: cfg.seed };
            }
            cfg
        }
        (None, Some(kind)) => ExperimentConfig::preset(kind, preset.unwrap_or(Preset::Default), a.seed.unwrap_or(0)),
        (None, None) => return Err(Error::Config("pass --config or --experiment".into()).into()),
    };
    if let Some(d) = &a.data {
        cfg.dataset = DatasetSource::Manifest { path: absolute(d)? };
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
        cfg.train.seed = s;
        if let DatasetSource::Preset { seed, .. } = &mut cfg.dataset {
            *seed = s;
        }
    }
    if a.paper_hparams {
        cfg.train = TrainConfig {
            seed: cfg.train.seed,
            ..TrainConfig::paper(Variant::Mle)
        };
        cfg.flow = paper_flow();
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(f) = a.folds {
        cfg.folds = f;
    }
    if let Some(r) = &a.ratios {
        cfg.ratios = r.clone();
    }
    if let Some(v) = &a.variants {
        cfg.variants = v.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn eval(a: EvalArgs, level: log::LevelFilter) -> Result<()> {
    let cfg = resolve_eval(&a)?;
    let dir = RunDir::open(rundir::resolve(a.out.out.clone(), "eval"), level)?;
    dir.write_json("config.json", &cfg)?;
    let ds = cfg.dataset.load(Path::new(""))?;
    let mut inputs = Inputs::default();
    if let DatasetSource::Manifest { path } = &cfg.dataset {
        inputs.file(path)?;
    }
    inputs.dataset(ds.content_digest());
    dir.write_inputs(&inputs)?;
    log::info!(
        "{} experiment on {} samples, {} folds",
        cfg.experiment.as_str(),
        ds.len(),
        cfg.folds
    );
    let opts = RunOptions {
        jobs: Some(a.jobs.unwrap_or(1)),
    };
    let out = run_experiment::<f64>(&ds, &cfg, opts)?;
    let report = ExperimentReport::from_output(&out);
    write_outputs(&report, dir.path())?;
    print!("{}", report.summary_csv());
    Ok(())
}

#[derive(Serialize)]
struct ModelSummary {
    path: String,
    sha256: String,
    encoder: EncoderSummary,
    flow: FlowSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    metadata: Option<ModelMetadata>,
}

#[derive(Serialize)]
struct EncoderSummary {
    kind: fpgate::EncoderKind,
    in_dim: usize,
    out_dim: usize,
    trainable: bool,
    params: usize,
}

#[derive(Serialize)]
struct FlowSummary {
    dim: usize,
    layers: usize,
    hidden: usize,
    conditioner_depth: usize,
    s_max: f64,
    params: usize,
}

pub fn inspect(a: InspectArgs) -> Result<()> {
    let bytes = fs::read(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let model = Pipeline::<f64>::from_bytes(&bytes)?;
    let first = &model.flow.layers()[0];
    let sidecar = a.model.with_extension("json");
    let metadata = if sidecar.exists() {
        Some(ModelMetadata::load(&sidecar)?)
    } else {
        None
    };
    let summary = ModelSummary {
        path: a.model.display().to_string(),
        sha256: sha256_hex(&bytes),
        encoder: EncoderSummary {
            kind: model.encoder.kind(),
            in_dim: model.encoder.in_dim(),
            out_dim: model.encoder.out_dim(),
            trainable: model.encoder.is_trainable(),
            params: model.encoder.num_params(),
        },
        flow: FlowSummary {
            dim: model.flow.dim(),
            layers: model.flow.num_layers(),
            hidden: first.scale_net().layers()[0].outputs(),
            conditioner_depth: first.scale_net().hidden_layers(),
            s_max: first.s_max(),
            params: model.flow.num_params(),
        },
        metadata,
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}
