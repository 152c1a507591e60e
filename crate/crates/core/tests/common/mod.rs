//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use fpgate::dataio::synth::two_moons;
use fpgate::dataio::Label;
use fpgate::training::{loss_fp, total_loss};
use fpgate::{
    train, Eager, EncoderModel, FlowConfig, FlowModel, Graph, Parameterized, Pipeline, Tape, Tensor, TrainConfig,
    TrainSet,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, scale: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| scale * r.sample::<f64, _>(StandardNormal))
}

/// A flow moved away from its identity initialisation.
pub fn random_flow(dim: usize, layers: usize, seed: u64, jitter: f64) -> FlowModel<f64> {
    let cfg = FlowConfig {
        layers,
        seed,
        ..FlowConfig::new(dim)
    };
    let mut flow = FlowModel::new(&cfg).unwrap();
    flow.jitter(&mut rng(seed ^ 0xABCD), jitter);
    flow
}

// ---------------------------------------------------------------- metrics

/// Labels are FP with probability 0.4; scores come from a coarse grid so ties
/// are common. Both labels are always present.
pub fn random_scored(r: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<Label>) {
    let n = n.max(2);
    let grid = f64::from(r.random_range(2..40u32));
    let mut labels: Vec<Label> = (0..n)
        .map(|_| if r.random_bool(0.4) { Label::Fp } else { Label::Tp })
        .collect();
    labels[0] = Label::Fp;
    labels[1] = Label::Tp;
    let scores = labels
        .iter()
        .map(|l| {
            let shift = if l.is_fp() { 3.0 } else { 0.0 };
            ((r.random::<f64>() * 10.0 + shift) * grid / 13.0).floor() / grid * 13.0
        })
        .collect();
    (scores, labels)
}

fn reject_counts(scores: &[f64], labels: &[Label], reject: impl Fn(f64) -> bool) -> (usize, usize, usize) {
    let mut tp = 0;
    let mut predicted = 0;
    let mut pos = 0;
    for (&s, l) in scores.iter().zip(labels) {
        pos += usize::from(l.is_fp());
        if reject(s) {
            predicted += 1;
            tp += usize::from(l.is_fp());
        }
    }
    (tp, predicted, pos)
}

fn distinct_descending(scores: &[f64]) -> Vec<f64> {
    let mut d = scores.to_vec();
    d.sort_by(|a, b| b.total_cmp(a));
    d.dedup();
    d
}

/// Step-wise AP recomputed from scratch at every distinct threshold.
pub fn brute_ap(scores: &[f64], labels: &[Label]) -> f64 {
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in distinct_descending(scores) {
        let (tp, predicted, pos) = reject_counts(scores, labels, |s| s >= t);
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * (tp as f64 / predicted as f64);
        prev_recall = recall;
    }
    ap
}

/// Mann-Whitney over all FP/TP pairs.
pub fn brute_auc(scores: &[f64], labels: &[Label]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, li) in labels.iter().enumerate() {
        for (j, lj) in labels.iter().enumerate() {
            if li.is_fp() && !lj.is_fp() {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Best F1 over every "reject when score >= t" cut.
pub fn brute_best_f1(scores: &[f64], labels: &[Label]) -> f64 {
    distinct_descending(scores)
        .into_iter()
        .map(|t| {
            let (tp, predicted, pos) = reject_counts(scores, labels, |s| s >= t);
            2.0 * tp as f64 / (predicted + pos) as f64
        })
        .fold(0.0, f64::max)
}

/// `(tp, fp, tn, fn)` for "reject when score > t".
pub fn brute_confusion(scores: &[f64], labels: &[Label], t: f64) -> [usize; 4] {
    let mut c = [0; 4];
    for (&s, l) in scores.iter().zip(labels) {
        let k = match (l.is_fp(), s > t) {
            (true, true) => 0,
            (false, true) => 1,
            (false, false) => 2,
            (true, false) => 3,
        };
        c[k] += 1;
    }
    c
}

// ---------------------------------------------------------------- flows

/// `log |det J|` of `flow.forward` from a central-difference Jacobian.
pub fn fd_logdet(flow: &FlowModel<f64>, e: &[f64], h: f64) -> f64 {
    let d = e.len();
    let mut j = DMatrix::<f64>::zeros(d, d);
    for c in 0..d {
        let mut plus = e.to_vec();
        let mut minus = e.to_vec();
        plus[c] += h;
        minus[c] -= h;
        let (zp, _) = flow.forward(&plus).unwrap();
        let (zm, _) = flow.forward(&minus).unwrap();
        for r in 0..d {
            j[(r, c)] = (zp[r] - zm[r]) / (2.0 * h);
        }
    }
    j.determinant().abs().ln()
}

pub struct GradCheck {
    pub checked: usize,
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

fn eager_total(model: &Pipeline<f64>, tp: &Tensor<f64>, fp: &Tensor<f64>, eps: f64) -> f64 {
    let mut g = Eager;
    let bound = model.bind(&mut g);
    let l = total_loss(&mut g, model, &bound, tp, fp, eps).unwrap();
    g.value(&l).item().unwrap()
}

/// Compares every trainable gradient of `total_loss` with central finite
/// differences. A parameter passes if the relative error is below `rel` or
/// both values are below `abs` in magnitude.
pub fn check_total_loss_gradient(
    model: &mut Pipeline<f64>,
    tp: &Tensor<f64>,
    fp: &Tensor<f64>,
    eps: f64,
    h: f64,
    rel: f64,
    abs: f64,
) -> GradCheck {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let loss = total_loss(&mut tape, model, &bound, tp, fp, eps).unwrap();
    tape.backward(loss).unwrap();
    let mut vars = bound.flow.clone();
    if model.encoder.is_trainable() {
        vars.extend(bound.encoder.iter().copied());
    }
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).cloned().expect("every trainable parameter gets a gradient"))
        .collect();

    let mut out = GradCheck {
        checked: 0,
        worst_rel: 0.0,
        failures: Vec::new(),
    };
    let n_tensors = analytic.len();
    for t in 0..n_tensors {
        for k in 0..analytic[t].len() {
            let orig = model.trainable_params_mut()[t].data()[k];
            model.trainable_params_mut()[t].data_mut()[k] = orig + h;
            let up = eager_total(model, tp, fp, eps);
            model.trainable_params_mut()[t].data_mut()[k] = orig - h;
            let down = eager_total(model, tp, fp, eps);
            model.trainable_params_mut()[t].data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic[t].data()[k];
            let err = (an - fd).abs();
            let scale = an.abs().max(fd.abs());
            out.checked += 1;
            if scale >= abs {
                out.worst_rel = out.worst_rel.max(err / scale);
            }
            if !(err <= rel * scale || (an.abs() < abs && fd.abs() < abs)) {
                out.failures.push(format!("tensor {t} entry {k}: analytic {an:e}, fd {fd:e}"));
            }
        }
    }
    out
}

/// A trainable-encoder pipeline with a hinge term that is active for most of
/// the FP batch and well away from its kink.
pub fn gradient_fixture(
    seed: u64,
    dim: usize,
    layers: usize,
    batch: usize,
    jitter: f64,
) -> (Pipeline<f64>, Tensor<f64>, Tensor<f64>, f64) {
    let mut r = rng(seed);
    let flow = random_flow(dim, layers, seed, jitter);
    let w = Tensor::from_fn(dim, dim, |i, j| if i == j { 1.0 } else { 0.0 } + 0.1 * r.sample::<f64, _>(StandardNormal));
    let b = gaussian(1, dim, 0.1, &mut r);
    let encoder = EncoderModel::linear(w, b).unwrap().with_trainable(true).unwrap();
    let model = Pipeline::new(encoder, flow).unwrap();
    let tp = gaussian(batch, dim, 1.0, &mut r);
    let fp = gaussian(batch, dim, 1.5, &mut r);
    let mut ll = model.log_likelihood_batch(&fp).unwrap().values;
    ll.sort_by(f64::total_cmp);
    // a margin between two well-separated FP likelihoods, below most of them
    let gaps: Vec<(f64, f64)> = ll.windows(2).take(ll.len() / 3).map(|w| (w[1] - w[0], (w[0] + w[1]) / 2.0)).collect();
    let eps = gaps.iter().copied().fold((0.0, ll[0] - 1.0), |a, b| if b.0 > a.0 { b } else { a }).1;
    // sanity: the hinge contributes
    let mut g = Eager;
    let bound = model.bind(&mut g);
    let lfp = loss_fp(&mut g, &model, &bound, &fp, eps).unwrap();
    assert!(g.value(&lfp).item().unwrap() > 0.0);
    (model, tp, fp, eps)
}

// ---------------------------------------------------------------- training fixtures

pub fn identity_encoder(dim: usize) -> EncoderModel<f64> {
    EncoderModel::identity(dim).unwrap()
}

pub fn moons_tensor(n: usize, seed: u64) -> Tensor<f64> {
    Tensor::from_rows(&two_moons(n, 0.1, seed)).unwrap()
}

/// Grid integral of `exp(log p)` over `[lo, hi]^2` with `n x n` midpoint cells.
pub fn grid_integral(model: &Pipeline<f64>, lo: f64, hi: f64, n: usize) -> f64 {
    let step = (hi - lo) / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        let x = lo + (i as f64 + 0.5) * step;
        let rows: Vec<[f64; 2]> = (0..n).map(|j| [x, lo + (j as f64 + 0.5) * step]).collect();
        let ll = model.log_likelihood_batch(&Tensor::from_rows(&rows).unwrap()).unwrap();
        total += ll.values.iter().map(|v| v.exp()).sum::<f64>();
    }
    total * step * step
}

pub fn train_tp_only(
    tp: Tensor<f64>,
    flow: FlowModel<f64>,
    cfg: &TrainConfig,
) -> fpgate::TrainOutcome<f64> {
    let d = tp.cols();
    let data = TrainSet::new(tp, Tensor::zeros(0, d)).unwrap();
    train(identity_encoder(d), flow, &data, None, cfg).unwrap()
}

pub fn mean_nll(model: &Pipeline<f64>, x: &Tensor<f64>) -> f64 {
    let ll = model.log_likelihood_batch(x).unwrap().values;
    -ll.iter().sum::<f64>() / ll.len() as f64
}
