mod common;

use common::*;
use fpgate::dataio::Label;
use fpgate::eval::{average_precision, roc_auc, ScoredSet};
use fpgate::training::MarginMode;
use fpgate::{train, EncoderModel, Error, Parameterized, Tensor, TrainConfig, TrainSet, ValidationSet, Variant};

fn blobs(seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut r = rng(seed);
    let tp = gaussian(400, 2, 1.0, &mut r);
    let fp = Tensor::from_fn(120, 2, |i, j| if j == 0 { 2.0 } else { 0.0 } + 0.5 * tp.get(i, j));
    (tp, fp)
}

fn cfg(variant: Variant, epochs: usize) -> TrainConfig {
    TrainConfig {
        variant,
        epochs,
        batch_tp: 64,
        batch_fp: 32,
        seed: 17,
        ..TrainConfig::default()
    }
}

fn linear_encoder() -> EncoderModel<f64> {
    EncoderModel::linear_identity(2).unwrap()
}

fn mean_ll(model: &fpgate::Pipeline<f64>, x: &Tensor<f64>) -> f64 {
    -mean_nll(model, x)
}

#[test]
fn mle_loss_descends() {
    let (tp, _) = blobs(1);
    let shifted = tp.map(|v| 3.0 * v + 1.0);
    let out = train_tp_only(shifted, random_flow(2, 6, 1, 0.0), &cfg(Variant::Mle, 30));
    let first = out.trace.epochs[0].loss_tp;
    let last = out.trace.epochs.last().unwrap().loss_tp;
    assert!(last < first - 0.5, "{first} -> {last}");
}

#[test]
fn small_steps_descend_on_a_fixed_batch() {
    let mut descending = 0;
    for trial in 0..100u64 {
        let mut r = rng(500 + trial);
        let tp = gaussian(24, 2, 1.0, &mut r).map(|v| 1.5 * v + 0.5);
        let fp = gaussian(12, 2, 0.5, &mut r).map(|v| v + 1.0);
        let data = TrainSet::new(tp, fp).unwrap();
        let c = TrainConfig {
            variant: Variant::Frozen,
            epochs: 11,
            lr: 1e-4,
            batch_tp: 24,
            batch_fp: 12,
            margin_mode: MarginMode::Fixed,
            margin_value: -3.0,
            seed: trial,
            ..TrainConfig::default()
        };
        let out = train(identity_encoder(2), random_flow(2, 4, trial, 0.3), &data, None, &c).unwrap();
        let total: Vec<f64> = out.trace.epochs.iter().map(|e| e.loss_tp + e.loss_fp).collect();
        descending += usize::from(total.windows(2).all(|w| w[1] <= w[0]));
    }
    assert!(descending >= 95, "{descending} of 100 trials descended");
}

#[test]
fn mle_recovers_gaussian_entropy() {
    let entropy = 1.0 + (2.0 * std::f64::consts::PI).ln();
    let x = gaussian(500, 2, 1.0, &mut rng(9));
    let out = train_tp_only(x.clone(), random_flow(2, 4, 9, 0.0), &cfg(Variant::Mle, 60));
    let nll = mean_nll(&out.model, &x);
    assert!((nll - entropy).abs() < 0.15, "{nll}");
}

#[test]
fn mle_never_reads_fps() {
    let (tp, fp) = blobs(2);
    let with = TrainSet::new(tp.clone(), fp).unwrap();
    let without = TrainSet::new(tp, Tensor::zeros(0, 2)).unwrap();
    let c = cfg(Variant::Mle, 5);
    let a = train(identity_encoder(2), random_flow(2, 6, 2, 0.0), &with, None, &c).unwrap();
    let b = train(identity_encoder(2), random_flow(2, 6, 2, 0.0), &without, None, &c).unwrap();
    assert_eq!(with.fp_reads(), 0);
    assert_eq!(a.model.to_bytes(), b.model.to_bytes());
    assert!(a.trace.same_numbers(&b.trace));
    assert_eq!(a.epsilon, None);
}

#[test]
fn training_is_deterministic() {
    let (tp, fp) = blobs(3);
    let data = TrainSet::new(tp, fp).unwrap();
    let c = cfg(Variant::Finetune, 4);
    let a = train(linear_encoder(), random_flow(2, 6, 3, 0.0), &data, None, &c).unwrap();
    let b = train(linear_encoder(), random_flow(2, 6, 3, 0.0), &data, None, &c).unwrap();
    assert_eq!(a.model.to_bytes(), b.model.to_bytes());
    assert!(a.trace.same_numbers(&b.trace));
    let other = train(linear_encoder(), random_flow(2, 6, 3, 0.0), &data, None, &TrainConfig { seed: 18, ..c }).unwrap();
    assert_ne!(a.model.to_bytes(), other.model.to_bytes());
}

#[test]
fn margin_pushes_fp_likelihood_down() {
    let (tp, fp) = blobs(4);
    let data = TrainSet::new(tp.clone(), fp.clone()).unwrap();
    let mle = train(identity_encoder(2), random_flow(2, 6, 4, 0.0), &data, None, &cfg(Variant::Mle, 20)).unwrap();
    let eps = mean_ll(&mle.model, &tp) - 2.0;
    let fixed = TrainConfig {
        margin_mode: MarginMode::Fixed,
        margin_value: eps,
        ..cfg(Variant::Frozen, 20)
    };
    let oe = train(identity_encoder(2), random_flow(2, 6, 4, 0.0), &data, None, &fixed).unwrap();
    assert!(data.fp_reads() > 0);
    assert_eq!(oe.epsilon, Some(eps));
    let above = |m: &fpgate::Pipeline<f64>| {
        m.log_likelihood_batch(&fp).unwrap().values.iter().filter(|&&v| v > eps).count()
    };
    assert!(mean_ll(&oe.model, &fp) < mean_ll(&mle.model, &fp) - 1.0);
    assert!(above(&oe.model) < above(&mle.model) / 2, "{} vs {}", above(&oe.model), above(&mle.model));
}

#[test]
fn margin_separates_linearly_separable_sets() {
    let mut r = rng(10);
    let tp = gaussian(300, 2, 0.5, &mut r);
    let fp = gaussian(100, 2, 0.5, &mut r).add(&Tensor::row(&[4.0, 0.0])).unwrap();
    // below the TP tail: the true log density at 3.5 sd is about -6.6
    let eps = -10.0;
    let c = TrainConfig {
        margin_mode: MarginMode::Fixed,
        margin_value: eps,
        ..cfg(Variant::Frozen, 60)
    };
    let data = TrainSet::new(tp.clone(), fp.clone()).unwrap();
    let out = train(identity_encoder(2), random_flow(2, 6, 10, 0.0), &data, None, &c).unwrap();
    let ll_tp = out.model.log_likelihood_batch(&tp).unwrap().values;
    let ll_fp = out.model.log_likelihood_batch(&fp).unwrap().values;
    let max_fp = ll_fp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_tp = ll_tp.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(max_fp <= eps + 0.5, "max FP log p {max_fp}");
    assert!(min_tp > eps, "min TP log p {min_tp}");
    let scores: Vec<f64> = ll_tp.iter().chain(&ll_fp).map(|v| -v).collect();
    let labels: Vec<Label> = (0..400).map(|i| if i < 300 { Label::Tp } else { Label::Fp }).collect();
    assert_eq!(roc_auc(&ScoredSet::new(scores, labels).unwrap()).unwrap(), 1.0);
}

#[test]
fn adaptive_margin_is_mean_minus_two_std_after_first_epoch() {
    let (tp, fp) = blobs(5);
    let data = TrainSet::new(tp.clone(), fp).unwrap();
    let out = train(identity_encoder(2), random_flow(2, 6, 5, 0.0), &data, None, &cfg(Variant::Frozen, 1)).unwrap();
    // the first epoch is TP-only, so the model is the one the margin was read from
    assert_eq!(out.trace.epochs[0].loss_fp, 0.0);
    let ll = out.model.log_likelihood_batch(&tp).unwrap().values;
    let n = ll.len() as f64;
    let mean = ll.iter().sum::<f64>() / n;
    let sd = (ll.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((out.epsilon.unwrap() - (mean - 2.0 * sd)).abs() < 1e-12);
}

#[test]
fn finetune_moves_the_encoder_and_frozen_does_not() {
    let (tp, fp) = blobs(6);
    let data = TrainSet::new(tp, fp).unwrap();
    let start = linear_encoder();
    let frozen = train(start.clone(), random_flow(2, 6, 6, 0.0), &data, None, &cfg(Variant::Frozen, 3)).unwrap();
    let fine = train(start.clone(), random_flow(2, 6, 6, 0.0), &data, None, &cfg(Variant::Finetune, 3)).unwrap();
    let bits = |e: &EncoderModel<f64>| e.params().iter().flat_map(|p| p.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&frozen.model.encoder), bits(&start));
    assert_ne!(bits(&fine.model.encoder), bits(&start));
    assert!(!frozen.model.encoder.is_trainable());
}

#[test]
fn checkpoint_is_the_best_validation_epoch() {
    let (tp, fp) = blobs(7);
    let data = TrainSet::new(tp.select_rows(&(0..300).collect::<Vec<_>>()), fp.select_rows(&(0..80).collect::<Vec<_>>())).unwrap();
    let rows: Vec<&[f64]> = (300..400).map(|i| tp.row_slice(i)).chain((80..120).map(|i| fp.row_slice(i))).collect();
    let vx = Tensor::from_rows(&rows).unwrap();
    let labels: Vec<Label> = (0..140).map(|i| if i < 100 { Label::Tp } else { Label::Fp }).collect();
    let val = ValidationSet { x: vx, labels };
    let out = train(linear_encoder(), random_flow(2, 6, 7, 0.0), &data, Some(&val), &cfg(Variant::Finetune, 8)).unwrap();
    let aps: Vec<f64> = out.trace.epochs.iter().map(|e| e.val_ap.unwrap()).collect();
    let best = aps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let first_best = aps.iter().position(|&a| a == best).unwrap() + 1;
    assert_eq!(out.best_epoch, first_best);
    assert_eq!(out.trace.best_val_ap(), Some(best));
    let scores = out.model.anomaly_scores(&val.x).unwrap();
    let ap = average_precision(&ScoredSet::new(scores, val.labels.clone()).unwrap()).unwrap();
    assert_eq!(ap, best, "returned model reproduces the best validation AP");
}

#[test]
fn precondition_and_numeric_failures() {
    let (tp, _) = blobs(8);
    let tp_only = TrainSet::new(tp.clone(), Tensor::zeros(0, 2)).unwrap();
    let r = train(identity_encoder(2), random_flow(2, 4, 8, 0.0), &tp_only, None, &cfg(Variant::Frozen, 1));
    assert!(matches!(r, Err(Error::Data(_))));
    let (_, fp) = blobs(8);
    let with_fp = TrainSet::new(tp, fp).unwrap();
    let r = train(identity_encoder(2), random_flow(2, 4, 8, 0.0), &with_fp, None, &cfg(Variant::Finetune, 1));
    assert!(matches!(r, Err(Error::Config(_))));

    let huge = TrainSet::new(Tensor::filled(10, 2, 1e200), Tensor::zeros(0, 2)).unwrap();
    let r = train(identity_encoder(2), random_flow(2, 4, 8, 0.0), &huge, None, &cfg(Variant::Mle, 2));
    assert!(matches!(r, Err(Error::Numeric(_))), "{r:?}");
}
