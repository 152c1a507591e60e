//! The three experiment protocols: comparative (TP-only training), FP data
//! efficiency, and leave-one-FP-class-out robustness.
//!
//! Every protocol runs the same stratified folds. Fold runs are independent
//! and may execute in parallel; results are always assembled in fold order.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{
    average_precision, confusion_metrics, pr_curve, roc_auc, roc_curve, score_histogram, select_threshold_f1,
    Histogram, PrPoint, RocPoint, ScoredSet,
};
use super::split::{kfold_split, FoldSplit};
use crate::baselines::{fit_baseline, score_baseline, BaselineSpec};
use crate::dataio::synth::{synth_generate, Preset, SynthSpec};
use crate::dataio::{load_dataset, Dataset, Label};
use crate::encoder::{EncoderModel, EncoderSpec};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::training::{train, TrainConfig, TrainSet, ValidationSet, Variant};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// The FP sampling ratios of the data-efficiency protocol.
pub const DEFAULT_RATIOS: [f64; 12] = [0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Comparative,
    DataEfficiency,
    ClassRobustness,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Comparative => "comparative",
            ExperimentKind::DataEfficiency => "data_efficiency",
            ExperimentKind::ClassRobustness => "class_robustness",
        }
    }
}

/// Where an experiment's data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Preset { preset: Preset, seed: u64 },
    Synth { spec: SynthSpec },
    /// Relative paths resolve against the config file's directory.
    Manifest { path: PathBuf },
}

impl DatasetSource {
    pub fn load(&self, base_dir: &Path) -> Result<Dataset> {
        match self {
            DatasetSource::Preset { preset, seed } => synth_generate(&SynthSpec::preset(*preset, *seed)),
            DatasetSource::Synth { spec } => synth_generate(spec),
            DatasetSource::Manifest { path } => load_dataset(&base_dir.join(path)),
        }
    }
}

/// Flow architecture; the input dimension comes from the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSettings {
    pub layers: usize,
    pub hidden: Option<usize>,
    pub conditioner_depth: usize,
    pub s_max: f64,
}

impl Default for FlowSettings {
    fn default() -> Self {
        let c = FlowConfig::new(2);
        Self {
            layers: c.layers,
            hidden: c.hidden,
            conditioner_depth: c.conditioner_depth,
            s_max: c.s_max,
        }
    }
}

impl FlowSettings {
    pub fn config(&self, dim: usize, seed: u64) -> FlowConfig {
        FlowConfig {
            dim,
            layers: self.layers,
            hidden: self.hidden,
            conditioner_depth: self.conditioner_depth,
            s_max: self.s_max,
            seed,
        }
    }
}

fn default_folds() -> usize {
    5
}

fn default_val_fraction() -> f64 {
    0.125
}

fn default_bins() -> usize {
    40
}

fn default_true() -> bool {
    true
}

fn default_ratios() -> Vec<f64> {
    DEFAULT_RATIOS.to_vec()
}

/// Frozen extractor used by the preset configs. The hard and confounded
/// presets get a whitened projection onto the two leading TP directions, so
/// anything the finetune variant gains must come from adapting it.
pub fn default_encoder(preset: Preset) -> EncoderSpec {
    match preset {
        Preset::Default | Preset::Easy => EncoderSpec::Standardize,
        Preset::Hard | Preset::Confounded => EncoderSpec::Pca { dim: 2 },
    }
}

/// A complete, serialisable experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment: ExperimentKind,
    pub dataset: DatasetSource,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    pub seed: u64,
    /// Flow variants to train. The data-efficiency protocol always adds an
    /// MLE reference row.
    pub variants: Vec<Variant>,
    /// Encoder for the MLE and frozen variants.
    pub encoder: EncoderSpec,
    /// Starting point of the trainable encoder used by the finetune variant.
    /// Defaults to `encoder`, with `identity` promoted to an identity-initialised
    /// linear map.
    #[serde(default)]
    pub finetune_encoder: Option<EncoderSpec>,
    #[serde(default)]
    pub flow: FlowSettings,
    pub train: TrainConfig,
    #[serde(default)]
    pub baselines: Vec<BaselineSpec>,
    #[serde(default = "default_ratios")]
    pub ratios: Vec<f64>,
    /// Downsample the majority label of each test fold (comparative and
    /// data-efficiency protocols).
    #[serde(default = "default_true")]
    pub balance_test: bool,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
}

impl ExperimentConfig {
    /// Desk-scale defaults for `kind` on a built-in synthetic preset.
    pub fn preset(kind: ExperimentKind, preset: Preset, seed: u64) -> Self {
        let (variants, baselines) = match kind {
            ExperimentKind::Comparative => (
                vec![Variant::Mle],
                vec![
                    BaselineSpec::Kde { bandwidth: None },
                    BaselineSpec::Pca { k: 2 },
                    BaselineSpec::Gaussian {
                        shrinkage: crate::baselines::DEFAULT_SHRINKAGE,
                    },
                ],
            ),
            ExperimentKind::DataEfficiency => (vec![Variant::Frozen, Variant::Finetune], vec![]),
            ExperimentKind::ClassRobustness => (vec![Variant::Mle, Variant::Frozen, Variant::Finetune], vec![]),
        };
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            experiment: kind,
            dataset: DatasetSource::Preset { preset, seed },
            folds: default_folds(),
            val_fraction: default_val_fraction(),
            seed,
            variants,
            encoder: default_encoder(preset),
            finetune_encoder: None,
            flow: FlowSettings::default(),
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            baselines,
            ratios: default_ratios(),
            balance_test: true,
            histogram_bins: default_bins(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return bad(format!(
                "unsupported config schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.folds < 2 {
            return bad(format!("folds must be at least 2, got {}", self.folds));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        if self.variants.is_empty() && self.baselines.is_empty() {
            return bad("nothing to evaluate: no variants and no baselines".into());
        }
        if self.experiment == ExperimentKind::DataEfficiency {
            if self.ratios.is_empty() {
                return bad("data_efficiency needs at least one ratio".into());
            }
            if let Some(r) = self.ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
                return bad(format!("ratios must lie in (0, 1], got {r}"));
            }
        }
        if let Some(EncoderSpec::Identity) = &self.finetune_encoder {
            return bad("finetune_encoder cannot be identity".into());
        }
        self.train.validate()
    }

    fn finetune_spec(&self) -> EncoderSpec {
        self.finetune_encoder.clone().unwrap_or_else(|| self.encoder.trainable_form())
    }

    fn sorted_ratios(&self) -> Vec<f64> {
        let mut r = self.ratios.clone();
        r.sort_by(f64::total_cmp);
        r.dedup();
        r
    }
}

/// Metrics of one scorer on one test fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub experiment: ExperimentKind,
    /// `mle`, `frozen`, `finetune`, or a baseline label.
    pub scorer: String,
    pub fold: usize,
    /// FP sampling ratio (data-efficiency protocol only).
    pub ratio: Option<f64>,
    /// Held-out FP class (class-robustness protocol only).
    pub held_out_class: Option<String>,
    pub n_test_tp: usize,
    pub n_test_fp: usize,
    pub ap: f64,
    pub auc: f64,
    pub threshold: f64,
    pub f1: f64,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    /// Test samples whose score was not finite.
    pub flagged: usize,
    pub best_epoch: Option<usize>,
    pub epsilon: Option<f64>,
    pub pr_curve: Vec<PrPoint>,
    pub roc_curve: Vec<RocPoint>,
    pub histogram: Histogram,
}

/// Everything one protocol run produced, in fold order.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutput {
    pub config: ExperimentConfig,
    pub dataset_digest: String,
    pub reports: Vec<EvalReport>,
}

/// Fold runs execute on at most `jobs` threads (`None` uses the global pool).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub jobs: Option<usize>,
}

/// Derives an independent 64-bit stream seed (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn variant_stream(v: Variant) -> u64 {
    match v {
        Variant::Mle => 1,
        Variant::Frozen => 2,
        Variant::Finetune => 3,
    }
}

/// Scores plus training bookkeeping for one scorer on one test set.
struct Scored {
    scorer: String,
    scores: Vec<f64>,
    best_epoch: Option<usize>,
    epsilon: Option<f64>,
}

fn build_report(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    test: &[usize],
    fold: usize,
    ratio: Option<f64>,
    held_out: Option<&str>,
    s: Scored,
) -> Result<EvalReport> {
    let labels = ds.labels(test);
    let flagged = s.scores.iter().filter(|v| !v.is_finite()).count();
    let set = ScoredSet::with_classes(s.scores, labels, ds.classes(test))?;
    let choice = select_threshold_f1(&set)?;
    let conf = if choice.threshold.is_finite() {
        Some(confusion_metrics(&set, choice.threshold)?)
    } else {
        None
    };
    Ok(EvalReport {
        experiment: cfg.experiment,
        scorer: s.scorer,
        fold,
        ratio,
        held_out_class: held_out.map(str::to_string),
        n_test_tp: set.negatives(),
        n_test_fp: set.positives(),
        ap: average_precision(&set)?,
        auc: roc_auc(&set)?,
        threshold: choice.threshold,
        f1: choice.f1,
        accuracy: conf.and_then(|c| c.accuracy),
        precision: conf.and_then(|c| c.precision),
        sensitivity: conf.and_then(|c| c.sensitivity),
        specificity: conf.and_then(|c| c.specificity),
        flagged,
        best_epoch: s.best_epoch,
        epsilon: s.epsilon,
        pr_curve: pr_curve(&set)?,
        roc_curve: roc_curve(&set)?,
        histogram: score_histogram(&set, cfg.histogram_bins),
    })
}

/// Trains one flow variant and scores `test`.
#[allow(clippy::too_many_arguments)]
fn run_flow<T: Real>(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    variant: Variant,
    train_idx: &[usize],
    val_idx: &[usize],
    test_idx: &[usize],
    seed: u64,
) -> Result<Scored> {
    let tp_idx: Vec<usize> = train_idx.iter().copied().filter(|&i| !ds.samples()[i].label.is_fp()).collect();
    let tp: Tensor<T> = ds.features(&tp_idx);
    let spec = if variant.trains_encoder() {
        cfg.finetune_spec()
    } else {
        cfg.encoder.clone()
    };
    let encoder: EncoderModel<T> = spec.build(&tp, derive_seed(seed, 11))?;
    let flow = FlowModel::new(&cfg.flow.config(encoder.out_dim(), derive_seed(seed, 12)))?;
    let data = TrainSet::<T>::from_dataset(ds, train_idx)?;
    let val = ValidationSet::<T>::from_dataset(ds, val_idx);
    let tcfg = TrainConfig {
        variant,
        seed: derive_seed(seed, 13),
        ..cfg.train.clone()
    };
    let out = train(encoder, flow, &data, (!val_idx.is_empty()).then_some(&val), &tcfg)?;
    let scores = out
        .model
        .anomaly_scores(&ds.features::<T>(test_idx))?
        .into_iter()
        .map(|v| v.as_f64())
        .collect();
    Ok(Scored {
        scorer: variant.as_str().to_string(),
        scores,
        best_epoch: Some(out.best_epoch),
        epsilon: out.epsilon,
    })
}

fn run_baseline<T: Real>(ds: &Dataset, spec: &BaselineSpec, train_idx: &[usize], test_idx: &[usize]) -> Result<Scored> {
    let tp_idx: Vec<usize> = train_idx.iter().copied().filter(|&i| !ds.samples()[i].label.is_fp()).collect();
    let model = fit_baseline(spec, &ds.features::<T>(&tp_idx))?;
    let scores = score_baseline(&model, &ds.features::<T>(test_idx))?
        .into_iter()
        .map(|v| v.as_f64())
        .collect();
    Ok(Scored {
        scorer: spec.label(),
        scores,
        best_epoch: None,
        epsilon: None,
    })
}

/// Downsamples the majority label of `test` to the minority count.
pub fn balance_test_set(ds: &Dataset, test: &[usize], seed: u64) -> Vec<usize> {
    let (mut fp, mut tp): (Vec<usize>, Vec<usize>) = test.iter().partition(|&&i| ds.samples()[i].label.is_fp());
    let keep = fp.len().min(tp.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for group in [&mut tp, &mut fp] {
        if group.len() > keep {
            ds.sort_by_id(group);
            group.shuffle(&mut rng);
            group.truncate(keep);
        }
    }
    let mut out: Vec<usize> = tp.into_iter().chain(fp).collect();
    ds.sort_by_id(&mut out);
    out
}

/// Nested FP subsets: the subset for each ratio is a prefix of one seeded
/// permutation of the training FPs. Ratios whose subset would be empty map
/// to `None`.
pub fn nested_fp_subsets(ds: &Dataset, train_fp: &[usize], ratios: &[f64], seed: u64) -> Vec<Option<Vec<usize>>> {
    let mut order = train_fp.to_vec();
    ds.sort_by_id(&mut order);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ratios
        .iter()
        .map(|&r| {
            let n = (r * order.len() as f64).round() as usize;
            (n > 0).then(|| {
                let mut s = order[..n.min(order.len())].to_vec();
                ds.sort_by_id(&mut s);
                s
            })
        })
        .collect()
}

fn with_pool<R: Send>(opts: RunOptions, f: impl FnOnce() -> R + Send) -> Result<R> {
    match opts.jobs {
        None => Ok(f()),
        Some(j) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(j.max(1))
                .build()
                .map_err(|e| Error::Config(format!("cannot start {j} worker threads: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn run_folds<F>(cfg: &ExperimentConfig, ds: &Dataset, opts: RunOptions, per_fold: F) -> Result<Vec<EvalReport>>
where
    F: Fn(&FoldSplit, u64) -> Result<Vec<EvalReport>> + Sync,
{
    let folds = kfold_split(ds, cfg.folds, cfg.val_fraction, cfg.seed)?;
    let results: Vec<Result<Vec<EvalReport>>> = with_pool(opts, || {
        folds
            .par_iter()
            .map(|f| per_fold(f, derive_seed(cfg.seed, 1000 + f.fold as u64)))
            .collect()
    })?;
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

fn check_kind(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<()> {
    cfg.validate()?;
    if cfg.experiment != kind {
        return Err(Error::Config(format!(
            "config describes a {} experiment, not {}",
            cfg.experiment.as_str(),
            kind.as_str()
        )));
    }
    Ok(())
}

/// Every scorer is fitted per fold; flow variants listed in the config train
/// on the training split (TP only for MLE) and baselines fit on its TPs.
pub fn run_comparative<T: Real>(ds: &Dataset, cfg: &ExperimentConfig, opts: RunOptions) -> Result<ExperimentOutput> {
    check_kind(cfg, ExperimentKind::Comparative)?;
    let reports = run_folds(cfg, ds, opts, |f, seed| {
        let test = if cfg.balance_test {
            balance_test_set(ds, &f.test, derive_seed(seed, 1))
        } else {
            f.test.clone()
        };
        let mut out = Vec::new();
        for &v in &cfg.variants {
            let s = run_flow::<T>(cfg, ds, v, &f.train, &f.val, &test, derive_seed(seed, 100 + variant_stream(v)))?;
            out.push(build_report(cfg, ds, &test, f.fold, None, None, s)?);
        }
        for b in &cfg.baselines {
            let s = run_baseline::<T>(ds, b, &f.train, &test)?;
            out.push(build_report(cfg, ds, &test, f.fold, None, None, s)?);
        }
        Ok(out)
    })?;
    Ok(ExperimentOutput {
        config: cfg.clone(),
        dataset_digest: ds.content_digest(),
        reports,
    })
}

/// For each ratio a nested subsample of the training FPs is exposed to the
/// FP-using variants. An MLE reference row (ratio `None`) and any baselines
/// are added per fold.
pub fn run_data_efficiency<T: Real>(ds: &Dataset, cfg: &ExperimentConfig, opts: RunOptions) -> Result<ExperimentOutput> {
    check_kind(cfg, ExperimentKind::DataEfficiency)?;
    if ds.count(Label::Fp) == 0 {
        return Err(Error::Data("data_efficiency needs FP samples".into()));
    }
    let ratios = cfg.sorted_ratios();
    let reports = run_folds(cfg, ds, opts, |f, seed| {
        let test = if cfg.balance_test {
            balance_test_set(ds, &f.test, derive_seed(seed, 1))
        } else {
            f.test.clone()
        };
        let (train_fp, train_tp): (Vec<usize>, Vec<usize>) =
            f.train.iter().partition(|&&i| ds.samples()[i].label.is_fp());
        let mut out = Vec::new();

        let s = run_flow::<T>(cfg, ds, Variant::Mle, &f.train, &f.val, &test, derive_seed(seed, 100))?;
        out.push(build_report(cfg, ds, &test, f.fold, None, None, s)?);
        for b in &cfg.baselines {
            let s = run_baseline::<T>(ds, b, &f.train, &test)?;
            out.push(build_report(cfg, ds, &test, f.fold, None, None, s)?);
        }

        let subsets = nested_fp_subsets(ds, &train_fp, &ratios, derive_seed(seed, 2));
        for (&r, subset) in ratios.iter().zip(subsets) {
            let Some(fps) = subset else {
                log::info!("fold {}: ratio {r} leaves no training FPs, skipped", f.fold);
                continue;
            };
            let mut train_idx: Vec<usize> = train_tp.iter().copied().chain(fps).collect();
            ds.sort_by_id(&mut train_idx);
            for &v in cfg.variants.iter().filter(|v| v.uses_fp()) {
                let stream = 100 + variant_stream(v) + 16 * (1 + (r * 1e6).round() as u64);
                let s = run_flow::<T>(cfg, ds, v, &train_idx, &f.val, &test, derive_seed(seed, stream))?;
                out.push(build_report(cfg, ds, &test, f.fold, Some(r), None, s)?);
            }
        }
        Ok(out)
    })?;
    Ok(ExperimentOutput {
        config: cfg.clone(),
        dataset_digest: ds.content_digest(),
        reports,
    })
}

/// For each FP class `c`: train on all training TPs plus training FPs of
/// every other class; validate and test on TPs plus FPs of class `c` only.
/// Test sets are not balanced.
pub fn run_class_robustness<T: Real>(
    ds: &Dataset,
    cfg: &ExperimentConfig,
    opts: RunOptions,
) -> Result<ExperimentOutput> {
    check_kind(cfg, ExperimentKind::ClassRobustness)?;
    let n_classes = ds.class_names().len();
    if n_classes < 2 {
        return Err(Error::Data(format!(
            "class robustness needs at least 2 FP classes, dataset has {n_classes}"
        )));
    }
    for (c, name) in ds.class_names().iter().enumerate() {
        if ds.samples().iter().all(|s| s.fp_class != Some(c)) {
            return Err(Error::Data(format!("FP class {name:?} has no samples")));
        }
    }
    let reports = run_folds(cfg, ds, opts, |f, seed| {
        let class_of = |i: usize| ds.samples()[i].fp_class;
        let mut out = Vec::new();
        for c in 0..n_classes {
            let name = ds.class_names()[c].as_str();
            let keep_for = |idx: &[usize], pred: &dyn Fn(Option<usize>) -> bool| -> Vec<usize> {
                idx.iter().copied().filter(|&i| pred(class_of(i))).collect()
            };
            let train_idx = keep_for(&f.train, &|k| k != Some(c));
            let val_idx = keep_for(&f.val, &|k| k.is_none() || k == Some(c));
            let test_idx = keep_for(&f.test, &|k| k.is_none() || k == Some(c));
            if !test_idx.iter().any(|&i| class_of(i) == Some(c)) {
                return Err(Error::Data(format!("fold {}: held-out class {name:?} has no test samples", f.fold)));
            }
            let class_seed = derive_seed(seed, 10_000 + c as u64);
            for &v in &cfg.variants {
                let s = run_flow::<T>(cfg, ds, v, &train_idx, &val_idx, &test_idx, derive_seed(class_seed, variant_stream(v)))?;
                out.push(build_report(cfg, ds, &test_idx, f.fold, None, Some(name), s)?);
            }
            for b in &cfg.baselines {
                let s = run_baseline::<T>(ds, b, &train_idx, &test_idx)?;
                out.push(build_report(cfg, ds, &test_idx, f.fold, None, Some(name), s)?);
            }
        }
        Ok(out)
    })?;
    Ok(ExperimentOutput {
        config: cfg.clone(),
        dataset_digest: ds.content_digest(),
        reports,
    })
}

/// Dispatches on `cfg.experiment`.
pub fn run_experiment<T: Real>(ds: &Dataset, cfg: &ExperimentConfig, opts: RunOptions) -> Result<ExperimentOutput> {
    match cfg.experiment {
        ExperimentKind::Comparative => run_comparative::<T>(ds, cfg, opts),
        ExperimentKind::DataEfficiency => run_data_efficiency::<T>(ds, cfg, opts),
        ExperimentKind::ClassRobustness => run_class_robustness::<T>(ds, cfg, opts),
    }
}
