//! Stratified k-fold splitting with an inner validation draw.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Label};
use crate::error::{Error, Result};

/// Index triple for one fold; each list is sorted by sample id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Strata are TP plus one per FP class.
fn strata(ds: &Dataset) -> Vec<Vec<usize>> {
    let n_classes = ds.class_names().len();
    let mut out = vec![Vec::new(); n_classes + 1];
    for (i, s) in ds.samples().iter().enumerate() {
        let k = match (s.label, s.fp_class) {
            (Label::Fp, Some(c)) => c + 1,
            _ => 0,
        };
        out[k].push(i);
    }
    for s in &mut out {
        ds.sort_by_id(s);
    }
    out
}

/// Splits `ds` into `k` stratified test folds. Within each fold the validation
/// set takes `val_fraction` of the non-test samples (stratified), the rest is
/// training. With `k = 5` and `val_fraction = 0.125` this gives 7:1:2.
///
/// The assignment depends only on sample ids, labels, classes and `seed`,
/// never on storage order.
pub fn kfold_split(ds: &Dataset, k: usize, val_fraction: f64, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("val_fraction must be in [0, 1), got {val_fraction}")));
    }
    let mut groups = strata(ds);
    for (si, g) in groups.iter().enumerate() {
        if !g.is_empty() && g.len() < k {
            let name = if si == 0 {
                "TP".to_string()
            } else {
                format!("FP class {:?}", ds.class_names()[si - 1])
            };
            return Err(Error::Data(format!(
                "{name} has {} samples, fewer than k = {k}",
                g.len()
            )));
        }
    }
    groups.retain(|g| !g.is_empty());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // fold_of[stratum][position] in the shuffled order
    let mut counter = 0usize;
    let mut assigned: Vec<Vec<(usize, usize)>> = Vec::with_capacity(groups.len());
    for g in &groups {
        let mut order = g.clone();
        order.shuffle(&mut rng);
        let fold_of = order
            .into_iter()
            .map(|i| {
                let f = counter % k;
                counter += 1;
                (i, f)
            })
            .collect();
        assigned.push(fold_of);
    }

    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        let mut test = Vec::new();
        let rest: Vec<Vec<usize>> = assigned
            .iter()
            .map(|g| {
                let mut r = Vec::new();
                for &(i, f) in g {
                    if f == fold {
                        test.push(i);
                    } else {
                        r.push(i);
                    }
                }
                r
            })
            .collect();
        let n_rest: usize = rest.iter().map(Vec::len).sum();
        let quotas = largest_remainder(&rest.iter().map(Vec::len).collect::<Vec<_>>(), (val_fraction * n_rest as f64).round() as usize);
        let mut fold_rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(fold as u64 + 1)));
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (mut members, q) in rest.into_iter().zip(quotas) {
            members.shuffle(&mut fold_rng);
            val.extend_from_slice(&members[..q]);
            train.extend_from_slice(&members[q..]);
        }
        for v in [&mut train, &mut val, &mut test] {
            ds.sort_by_id(v);
        }
        folds.push(FoldSplit { fold, train, val, test });
    }
    Ok(folds)
}

/// Stratified train/validation split of the whole dataset; returns
/// `(train, val)`, each sorted by id.
pub fn holdout_split(ds: &Dataset, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("val_fraction must be in [0, 1), got {val_fraction}")));
    }
    let groups = strata(ds);
    let quotas = largest_remainder(
        &groups.iter().map(Vec::len).collect::<Vec<_>>(),
        (val_fraction * ds.len() as f64).round() as usize,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (mut members, q) in groups.into_iter().zip(quotas) {
        members.shuffle(&mut rng);
        val.extend_from_slice(&members[..q]);
        train.extend_from_slice(&members[q..]);
    }
    ds.sort_by_id(&mut train);
    ds.sort_by_id(&mut val);
    Ok((train, val))
}

/// Splits `total` across groups proportionally to `sizes`.
fn largest_remainder(sizes: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = sizes.iter().sum();
    if sum == 0 {
        return vec![0; sizes.len()];
    }
    let exact: Vec<f64> = sizes.iter().map(|&s| s as f64 * total as f64 / sum as f64).collect();
    let mut q: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = total.saturating_sub(q.iter().sum());
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for i in order {
        if left == 0 {
            break;
        }
        if q[i] < sizes[i] {
            q[i] += 1;
            left -= 1;
        }
    }
    q
}
