//! Likelihood losses, AdamW and the training loop for the three variants.

use std::cell::Cell;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Label};
use crate::encoder::{EncoderKind, EncoderModel};
use crate::error::{Error, Result};
use crate::eval::metrics::{average_precision, roc_auc, ScoredSet};
use crate::flow::FlowModel;
use crate::gradcore::{Graph, Tape};
use crate::model::{BoundPipeline, Pipeline};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// TPs only, frozen encoder.
    Mle,
    /// TPs and FPs, frozen encoder.
    Frozen,
    /// TPs and FPs, encoder trained jointly with the flow.
    Finetune,
}

impl Variant {
    pub fn uses_fp(self) -> bool {
        self != Variant::Mle
    }

    pub fn trains_encoder(self) -> bool {
        self == Variant::Finetune
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Mle => "mle",
            Variant::Frozen => "frozen",
            Variant::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginMode {
    /// Use `margin_value` throughout.
    Fixed,
    /// After the first epoch set the margin to the validation TP
    /// log-likelihood mean minus two standard deviations, then keep it.
    Adaptive,
}

/// Omitted fields take their [`Default`] values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps_adam: f64,
    pub batch_tp: usize,
    pub batch_fp: usize,
    pub margin_mode: MarginMode,
    pub margin_value: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Mle,
            epochs: 200,
            lr: 1e-3,
            weight_decay: 0.1,
            betas: (0.9, 0.999),
            eps_adam: 1e-8,
            batch_tp: 256,
            batch_fp: 256,
            margin_mode: MarginMode::Adaptive,
            margin_value: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The published hyperparameters: 100 epochs, lr 1e-5, weight decay 0.1,
    /// batch 2048 (32 when finetuning the encoder).
    pub fn paper(variant: Variant) -> Self {
        let batch = if variant == Variant::Finetune { 32 } else { 2048 };
        Self {
            variant,
            epochs: 100,
            lr: 1e-5,
            batch_tp: batch,
            batch_fp: batch,
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if !(self.eps_adam > 0.0) {
            return bad(format!("eps_adam must be positive, got {}", self.eps_adam));
        }
        if self.batch_tp == 0 || self.batch_fp == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if !self.margin_value.is_finite() {
            return bad("margin_value must be finite".into());
        }
        Ok(())
    }
}

/// Training features split by label. FP reads are counted so callers can
/// check that TP-only training never touches them.
#[derive(Debug)]
pub struct TrainSet<T> {
    tp: Tensor<T>,
    fp: Tensor<T>,
    fp_reads: Cell<usize>,
}

impl<T: Real> TrainSet<T> {
    pub fn new(tp: Tensor<T>, fp: Tensor<T>) -> Result<Self> {
        if !fp.is_empty() && tp.cols() != fp.cols() {
            return Err(Error::shape(
                "train set",
                format!("TP rows have {} features, FP rows {}", tp.cols(), fp.cols()),
            ));
        }
        Ok(Self {
            tp,
            fp,
            fp_reads: Cell::new(0),
        })
    }

    pub fn from_dataset(ds: &Dataset, idx: &[usize]) -> Result<Self> {
        let tp: Vec<usize> = idx.iter().copied().filter(|&i| !ds.samples()[i].label.is_fp()).collect();
        let fp: Vec<usize> = idx.iter().copied().filter(|&i| ds.samples()[i].label.is_fp()).collect();
        let fp = if fp.is_empty() {
            Tensor::zeros(0, ds.d_in())
        } else {
            ds.features(&fp)
        };
        Self::new(ds.features(&tp), fp)
    }

    pub fn tp(&self) -> &Tensor<T> {
        &self.tp
    }

    pub fn n_tp(&self) -> usize {
        self.tp.rows()
    }

    pub fn n_fp(&self) -> usize {
        self.fp.rows()
    }

    /// Number of FP rows handed out so far.
    pub fn fp_reads(&self) -> usize {
        self.fp_reads.get()
    }

    fn fp_rows(&self, idx: &[usize]) -> Tensor<T> {
        self.fp_reads.set(self.fp_reads.get() + idx.len());
        self.fp.select_rows(idx)
    }
}

/// Held-out rows used for checkpoint selection.
#[derive(Clone, Debug)]
pub struct ValidationSet<T> {
    pub x: Tensor<T>,
    pub labels: Vec<Label>,
}

impl<T: Real> ValidationSet<T> {
    pub fn from_dataset(ds: &Dataset, idx: &[usize]) -> Self {
        Self {
            x: ds.features(idx),
            labels: ds.labels(idx),
        }
    }

    fn tp_rows(&self) -> Tensor<T> {
        let idx: Vec<usize> = (0..self.labels.len()).filter(|&i| !self.labels[i].is_fp()).collect();
        self.x.select_rows(&idx)
    }

    fn has_both_labels(&self) -> bool {
        self.labels.iter().any(|l| l.is_fp()) && self.labels.iter().any(|l| !l.is_fp())
    }
}

/// `-mean log p(E(x))` over a TP batch.
pub fn loss_tp<T: Real, G: Graph<T>>(
    g: &mut G,
    model: &Pipeline<T>,
    bound: &BoundPipeline<G::Var>,
    batch: &Tensor<T>,
) -> Result<G::Var> {
    if batch.rows() == 0 {
        return Err(Error::InvalidArgument("TP batch is empty".into()));
    }
    let x = g.constant(batch.clone());
    let lp = model.log_prob_graph(g, bound, &x)?;
    let m = g.mean(&lp)?;
    g.scale(&m, -T::one())
}

/// `mean max(0, log p(E(x)) - eps)` over an FP batch; exactly zero when the
/// batch is empty.
pub fn loss_fp<T: Real, G: Graph<T>>(
    g: &mut G,
    model: &Pipeline<T>,
    bound: &BoundPipeline<G::Var>,
    batch: &Tensor<T>,
    eps: T,
) -> Result<G::Var> {
    if batch.rows() == 0 {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let x = g.constant(batch.clone());
    let lp = model.log_prob_graph(g, bound, &x)?;
    let e = g.constant(Tensor::scalar(eps));
    let shifted = g.sub(&lp, &e)?;
    let hinge = g.max_const(&shifted, T::zero())?;
    g.mean(&hinge)
}

/// `loss_tp + loss_fp`. With an empty FP batch this is the TP loss node
/// itself.
pub fn total_loss<T: Real, G: Graph<T>>(
    g: &mut G,
    model: &Pipeline<T>,
    bound: &BoundPipeline<G::Var>,
    tp: &Tensor<T>,
    fp: &Tensor<T>,
    eps: T,
) -> Result<G::Var> {
    let ltp = loss_tp(g, model, bound, tp)?;
    if fp.rows() == 0 {
        return Ok(ltp);
    }
    let lfp = loss_fp(g, model, bound, fp, eps)?;
    g.add(&ltp, &lfp)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamWConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lr: c.lr,
            betas: c.betas,
            eps: c.eps_adam,
            weight_decay: c.weight_decay,
        }
    }
}

/// First and second moments plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Real> AdamWState<T> {
    pub fn new(params: &[&mut Tensor<T>]) -> Self {
        let zeros = |p: &&mut Tensor<T>| Tensor::zeros(p.rows(), p.cols());
        Self {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One decoupled-weight-decay Adam update. A missing gradient counts as zero.
/// Returns `false`, leaving parameters and state untouched, when any
/// gradient is not finite.
pub fn adamw_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[Option<&Tensor<T>>],
    state: &mut AdamWState<T>,
    cfg: &AdamWConfig,
) -> Result<bool> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidArgument(format!(
            "adamw: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    "adamw",
                    format!("gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
                ));
            }
            if !g.all_finite() {
                log::warn!("skipping optimizer step {}: non-finite gradient", state.t + 1);
                return Ok(false);
            }
        }
    }
    state.t += 1;
    let (b1, b2) = (T::lit(cfg.betas.0), T::lit(cfg.betas.1));
    let one = T::one();
    let c1 = one - b1.powi(state.t as i32);
    let c2 = one - b2.powi(state.t as i32);
    let (lr, eps, wd) = (T::lit(cfg.lr), T::lit(cfg.eps), T::lit(cfg.weight_decay));
    for (k, p) in params.iter_mut().enumerate() {
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        let g = grads[k].map(|g| g.data());
        for (j, pj) in p.data_mut().iter_mut().enumerate() {
            let gj = g.map_or(T::zero(), |g| g[j]);
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *pj = *pj - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *pj);
        }
    }
    Ok(true)
}

/// One row of the training trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss_tp: f64,
    pub loss_fp: f64,
    pub val_ap: Option<f64>,
    pub val_auc: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
}

impl TrainTrace {
    /// Equality ignoring wall time.
    pub fn same_numbers(&self, other: &Self) -> bool {
        self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.loss_tp.to_bits() == b.loss_tp.to_bits()
                    && a.loss_fp.to_bits() == b.loss_fp.to_bits()
                    && a.val_ap.map(f64::to_bits) == b.val_ap.map(f64::to_bits)
                    && a.val_auc.map(f64::to_bits) == b.val_auc.map(f64::to_bits)
            })
    }

    pub fn best_val_ap(&self) -> Option<f64> {
        self.epochs.iter().filter_map(|e| e.val_ap).reduce(f64::max)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("epoch,loss_tp,loss_fp,val_ap,val_auc,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.3}",
                e.epoch,
                e.loss_tp,
                e.loss_fp,
                opt(e.val_ap),
                opt(e.val_auc),
                e.seconds
            );
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: Pipeline<T>,
    pub trace: TrainTrace,
    /// Margin used by the FP loss; `None` for TP-only training.
    pub epsilon: Option<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

struct EpochStats {
    loss_tp: f64,
    loss_fp: f64,
}

/// Cycles through the FP rows in reshuffled passes.
struct FpCursor {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl FpCursor {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        let k = k.min(self.order.len());
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn validation_scores<T: Real>(model: &Pipeline<T>, val: &ValidationSet<T>) -> Result<(Option<f64>, Option<f64>)> {
    if !val.has_both_labels() {
        return Ok((None, None));
    }
    let scores = model.anomaly_scores(&val.x)?;
    let set = ScoredSet::new(scores, val.labels.clone())?;
    Ok((Some(average_precision(&set)?), Some(roc_auc(&set)?)))
}

fn mean_tp_nll<T: Real>(model: &Pipeline<T>, x: &Tensor<T>) -> Result<f64> {
    let ll = model.log_likelihood_batch(x)?;
    let n = ll.values.len().max(1) as f64;
    Ok(-ll.values.iter().map(|v| v.as_f64()).sum::<f64>() / n)
}

/// Mean minus two standard deviations of the log-likelihood of `x`.
fn adaptive_margin<T: Real>(model: &Pipeline<T>, x: &Tensor<T>) -> Result<f64> {
    let ll: Vec<f64> = model
        .log_likelihood_batch(x)?
        .values
        .iter()
        .map(|v| v.as_f64())
        .filter(|v| v.is_finite())
        .collect();
    if ll.is_empty() {
        return Err(Error::Numeric("no finite TP log-likelihoods to set the margin".into()));
    }
    let n = ll.len() as f64;
    let mean = ll.iter().sum::<f64>() / n;
    let var = ll.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(mean - 2.0 * var.sqrt())
}

/// Trains `flow` (and `encoder`, for the finetune variant) on `data`,
/// keeping the parameters of the epoch with the best validation AP.
///
/// Without labelled validation data of both kinds the epoch with the lowest
/// validation TP NLL is kept, or the last epoch when there is no validation
/// data at all.
pub fn train<T: Real>(
    encoder: EncoderModel<T>,
    flow: FlowModel<T>,
    data: &TrainSet<T>,
    val: Option<&ValidationSet<T>>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.n_tp() == 0 {
        return Err(Error::Data("training set has no TP samples".into()));
    }
    if cfg.variant.uses_fp() && data.n_fp() == 0 {
        return Err(Error::Data(format!(
            "variant {} needs FP samples but the training set has none",
            cfg.variant.as_str()
        )));
    }
    let encoder = if cfg.variant.trains_encoder() {
        if encoder.kind() == EncoderKind::Identity {
            return Err(Error::Config(
                "the finetune variant needs a linear or mlp encoder, not identity".into(),
            ));
        }
        encoder.with_trainable(true)?
    } else {
        match encoder.kind() {
            EncoderKind::Identity => encoder,
            _ => encoder.with_trainable(false)?,
        }
    };
    let mut model = Pipeline::new(encoder, flow)?;
    if data.tp.cols() != model.in_dim() {
        return Err(Error::shape(
            "train",
            format!("data has {} features, model expects {}", data.tp.cols(), model.in_dim()),
        ));
    }

    let mut opt_cfg = AdamWConfig::from(cfg);
    let mut state = AdamWState::new(&model.trainable_params_mut());
    let mut tp_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut fp_cursor = cfg
        .variant
        .uses_fp()
        .then(|| FpCursor::new(data.n_fp(), cfg.seed ^ 0x5EED_0FF9));
    let mut epsilon = match (cfg.variant.uses_fp(), cfg.margin_mode) {
        (true, MarginMode::Fixed) => Some(cfg.margin_value),
        _ => None,
    };
    let val_tp = val.map(|v| v.tp_rows()).filter(|t| t.rows() > 0);
    let select_by_ap = val.is_some_and(|v| v.has_both_labels());

    let mut trace = TrainTrace::default();
    let mut best: Option<(f64, usize, Pipeline<T>)> = None;
    let mut halved = false;
    let mut epoch = 1;
    while epoch <= cfg.epochs {
        let started = Instant::now();
        let snapshot = (model.clone(), state.clone(), tp_rng.clone());
        let fp_snapshot = fp_cursor.as_ref().map(|c| (c.order.clone(), c.pos, c.rng.clone()));
        let eps_now = epsilon;
        match run_epoch(&mut model, &mut state, &opt_cfg, data, &mut tp_rng, fp_cursor.as_mut(), eps_now, cfg) {
            Ok(stats) => {
                if cfg.variant.uses_fp() && epsilon.is_none() {
                    let source = val_tp.as_ref().unwrap_or(&data.tp);
                    let eps = adaptive_margin(&model, source)?;
                    log::info!("adaptive margin set to {eps:.4} after epoch {epoch}");
                    epsilon = Some(eps);
                }
                let (val_ap, val_auc) = match val {
                    Some(v) => validation_scores(&model, v)?,
                    None => (None, None),
                };
                let criterion = if select_by_ap {
                    val_ap
                } else if let Some(x) = &val_tp {
                    Some(-mean_tp_nll(&model, x)?)
                } else {
                    None
                };
                let better = match (&best, criterion) {
                    (_, None) => true,
                    (None, Some(c)) => c.is_finite(),
                    (Some((b, _, _)), Some(c)) => c > *b,
                };
                if better {
                    best = Some((criterion.unwrap_or(f64::NEG_INFINITY), epoch, model.clone()));
                }
                trace.epochs.push(EpochRecord {
                    epoch,
                    loss_tp: stats.loss_tp,
                    loss_fp: stats.loss_fp,
                    val_ap,
                    val_auc,
                    seconds: started.elapsed().as_secs_f64(),
                });
                log::debug!(
                    "epoch {epoch}: loss_tp {:.5} loss_fp {:.5} val_ap {:?}",
                    stats.loss_tp,
                    stats.loss_fp,
                    val_ap
                );
                epoch += 1;
            }
            Err(Error::Numeric(msg)) => {
                if halved {
                    return Err(Error::Numeric(format!(
                        "non-finite loss again in epoch {epoch} after halving the learning rate: {msg}"
                    )));
                }
                halved = true;
                opt_cfg.lr *= 0.5;
                log::warn!("epoch {epoch}: {msg}; restoring parameters and halving lr to {}", opt_cfg.lr);
                (model, state, tp_rng) = snapshot;
                if let (Some(c), Some((order, pos, rng))) = (fp_cursor.as_mut(), fp_snapshot) {
                    c.order = order;
                    c.pos = pos;
                    c.rng = rng;
                }
            }
            Err(e) => return Err(e),
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        trace,
        epsilon,
        best_epoch,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_epoch<T: Real>(
    model: &mut Pipeline<T>,
    state: &mut AdamWState<T>,
    opt: &AdamWConfig,
    data: &TrainSet<T>,
    tp_rng: &mut ChaCha8Rng,
    mut fp_cursor: Option<&mut FpCursor>,
    epsilon: Option<f64>,
    cfg: &TrainConfig,
) -> Result<EpochStats> {
    let mut order: Vec<usize> = (0..data.n_tp()).collect();
    order.shuffle(tp_rng);
    let (mut sum_tp, mut sum_fp, mut steps) = (0.0, 0.0, 0usize);
    for chunk in order.chunks(cfg.batch_tp) {
        let tp = data.tp.select_rows(chunk);
        // The FP term only joins once a margin exists.
        let fp_batch = match (fp_cursor.as_deref_mut(), epsilon) {
            (Some(c), Some(_)) => Some(data.fp_rows(&c.next(cfg.batch_fp))),
            _ => None,
        };
        let eps = T::lit(epsilon.unwrap_or(0.0));

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let ltp = loss_tp(&mut tape, model, &bound, &tp)?;
        let (loss, lfp_value) = match &fp_batch {
            Some(fp) => {
                let lfp = loss_fp(&mut tape, model, &bound, fp, eps)?;
                let v = tape.value(lfp).item()?.as_f64();
                (tape.add(&ltp, &lfp)?, v)
            }
            None => (ltp, 0.0),
        };
        let ltp_value = tape.value(ltp).item()?.as_f64();
        let total = tape.value(loss).item()?;
        if !total.is_finite() {
            return Err(Error::Numeric(format!("loss is {total} at step {}", steps + 1)));
        }
        tape.backward(loss)?;

        let mut vars = bound.flow.clone();
        if model.encoder.is_trainable() {
            vars.extend(bound.encoder.iter().copied());
        }
        let grads: Vec<Option<Tensor<T>>> = vars.iter().map(|&v| tape.grad(v).cloned()).collect();
        let grad_refs: Vec<Option<&Tensor<T>>> = grads.iter().map(Option::as_ref).collect();
        adamw_step(&mut model.trainable_params_mut(), &grad_refs, state, opt)?;

        sum_tp += ltp_value;
        sum_fp += lfp_value;
        steps += 1;
    }
    let n = steps.max(1) as f64;
    Ok(EpochStats {
        loss_tp: sum_tp / n,
        loss_fp: sum_fp / n,
    })
}
