//! Classical anomaly scorers fitted on TP features: Gaussian kernel density,
//! PCA reconstruction error and a shrinkage Gaussian (Mahalanobis distance).
//!
//! All scores follow the flow's convention: higher means more anomalous.
//! Fitting and scoring run in `f64` whatever the caller's scalar type.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{mean_and_covariance, sorted_eigen};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const DEFAULT_SHRINKAGE: f64 = 0.05;

fn default_shrinkage() -> f64 {
    DEFAULT_SHRINKAGE
}

/// Baseline selection as it appears in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaselineSpec {
    /// `bandwidth: None` uses Scott's rule.
    Kde {
        #[serde(default)]
        bandwidth: Option<f64>,
    },
    Pca {
        k: usize,
    },
    Gaussian {
        #[serde(default = "default_shrinkage")]
        shrinkage: f64,
    },
}

impl BaselineSpec {
    /// Report label: `kde`, `pca<k>` or `gaussian`.
    pub fn label(&self) -> String {
        match self {
            BaselineSpec::Kde { .. } => "kde".into(),
            BaselineSpec::Pca { k } => format!("pca{k}"),
            BaselineSpec::Gaussian { .. } => "gaussian".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KdeModel {
    points: Vec<Vec<f64>>,
    bandwidth: f64,
}

impl KdeModel {
    pub fn new(points: Vec<Vec<f64>>, bandwidth: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("kde needs at least one point".into()));
        }
        check_rows(&points)?;
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidArgument(format!("kde bandwidth must be positive, got {bandwidth}")));
        }
        Ok(Self { points, bandwidth })
    }

    /// Scott's rule: `n^(-1/(d+4))` times the mean per-feature standard
    /// deviation.
    pub fn scott_bandwidth(points: &[Vec<f64>]) -> Result<f64> {
        let (_, cov) = mean_and_covariance(points)?;
        let d = cov.nrows();
        let mean_sd = (0..d).map(|i| cov[(i, i)].sqrt()).sum::<f64>() / d as f64;
        let bw = (points.len() as f64).powf(-1.0 / (d as f64 + 4.0)) * mean_sd;
        if !(bw > 0.0) {
            return Err(Error::Numeric(
                "kde bandwidth is zero because the training features have no spread; set it explicitly".into(),
            ));
        }
        Ok(bw)
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    /// `-log((1/n) sum_i N(x; x_i, bw^2 I))`, via log-sum-exp.
    pub fn score(&self, x: &[f64]) -> f64 {
        let d = self.dim() as f64;
        let h2 = self.bandwidth * self.bandwidth;
        let exps: Vec<f64> = self.points.iter().map(|p| -sq_dist(x, p) / (2.0 * h2)).collect();
        let max = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + exps.iter().map(|e| (e - max).exp()).sum::<f64>().ln();
        let log_density = lse - (self.points.len() as f64).ln() - 0.5 * d * (2.0 * std::f64::consts::PI * h2).ln();
        -log_density
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    mean: Vec<f64>,
    /// `k` orthonormal directions of length `d`.
    basis: Vec<Vec<f64>>,
}

impl PcaModel {
    pub fn fit(points: &[Vec<f64>], k: usize) -> Result<Self> {
        let (mean, cov) = mean_and_covariance(points)?;
        let d = mean.len();
        let limit = (points.len() - 1).min(d);
        if k == 0 || k > limit {
            return Err(Error::Config(format!(
                "pca needs 1 <= k <= min(n-1, d) = {limit}, got {k}"
            )));
        }
        let basis = sorted_eigen(&cov).into_iter().take(k).map(|(_, v)| v).collect();
        Ok(Self { mean, basis })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn basis(&self) -> &[Vec<f64>] {
        &self.basis
    }

    /// Squared reconstruction error after projecting onto the basis.
    pub fn score(&self, x: &[f64]) -> f64 {
        let c: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let mut resid = c.clone();
        for b in &self.basis {
            let coef: f64 = c.iter().zip(b).map(|(u, v)| u * v).sum();
            for (r, v) in resid.iter_mut().zip(b) {
                *r -= coef * v;
            }
        }
        resid.iter().map(|r| r * r).sum()
    }
}

#[derive(Clone, Debug)]
pub struct GaussianModel {
    mean: Vec<f64>,
    chol: Cholesky<f64, nalgebra::Dyn>,
}

impl GaussianModel {
    /// Uses `cov` as given; it must be symmetric positive definite.
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::shape(
                "gaussian",
                format!("mean has {} entries, covariance is {}x{}", mean.len(), cov.nrows(), cov.ncols()),
            ));
        }
        let chol = Cholesky::new(cov).ok_or_else(|| {
            Error::Numeric("covariance is not positive definite; raise the shrinkage".into())
        })?;
        Ok(Self { mean, chol })
    }

    /// Sample covariance shrunk toward `tr/d * I` by `shrinkage`.
    pub fn fit(points: &[Vec<f64>], shrinkage: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&shrinkage) {
            return Err(Error::Config(format!("shrinkage must lie in [0, 1], got {shrinkage}")));
        }
        let (mean, cov) = mean_and_covariance(points)?;
        let d = mean.len();
        let target = cov.trace() / d as f64;
        let shrunk = cov * (1.0 - shrinkage) + DMatrix::identity(d, d) * (shrinkage * target);
        Self::new(mean, shrunk).map_err(|e| match e {
            Error::Numeric(_) => Error::Numeric(format!(
                "covariance is singular at shrinkage {shrinkage}; raise the shrinkage toward 1"
            )),
            e => e,
        })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// `(x - mu)^T Sigma^{-1} (x - mu)`.
    pub fn score(&self, x: &[f64]) -> f64 {
        let c = DVector::from_iterator(x.len(), x.iter().zip(&self.mean).map(|(a, m)| a - m));
        let y = self
            .chol
            .l()
            .solve_lower_triangular(&c)
            .expect("Cholesky factor has a positive diagonal");
        y.norm_squared()
    }
}

#[derive(Clone, Debug)]
pub enum BaselineModel {
    Kde(KdeModel),
    Pca(PcaModel),
    Gaussian(GaussianModel),
}

impl BaselineModel {
    pub fn dim(&self) -> usize {
        match self {
            BaselineModel::Kde(m) => m.dim(),
            BaselineModel::Pca(m) => m.mean.len(),
            BaselineModel::Gaussian(m) => m.mean.len(),
        }
    }

    pub fn score_row(&self, x: &[f64]) -> f64 {
        match self {
            BaselineModel::Kde(m) => m.score(x),
            BaselineModel::Pca(m) => m.score(x),
            BaselineModel::Gaussian(m) => m.score(x),
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_rows(rows: &[Vec<f64>]) -> Result<()> {
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::shape("baseline", "rows must share a non-zero length"));
    }
    Ok(())
}

fn to_rows<T: Real>(x: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..x.rows())
        .map(|r| x.row_slice(r).iter().map(|v| v.as_f64()).collect())
        .collect()
}

/// Fits a baseline on TP features (one sample per row).
pub fn fit_baseline<T: Real>(spec: &BaselineSpec, tp: &Tensor<T>) -> Result<BaselineModel> {
    if tp.rows() < 2 {
        return Err(Error::InvalidArgument(format!(
            "baselines need at least 2 training samples, got {}",
            tp.rows()
        )));
    }
    let rows = to_rows(tp);
    check_rows(&rows)?;
    Ok(match spec {
        BaselineSpec::Kde { bandwidth } => {
            let bw = match bandwidth {
                Some(b) => *b,
                None => KdeModel::scott_bandwidth(&rows)?,
            };
            BaselineModel::Kde(KdeModel::new(rows, bw)?)
        }
        BaselineSpec::Pca { k } => BaselineModel::Pca(PcaModel::fit(&rows, *k)?),
        BaselineSpec::Gaussian { shrinkage } => BaselineModel::Gaussian(GaussianModel::fit(&rows, *shrinkage)?),
    })
}

/// Anomaly score per row of `x`.
pub fn score_baseline<T: Real>(model: &BaselineModel, x: &Tensor<T>) -> Result<Vec<T>> {
    if x.cols() != model.dim() {
        return Err(Error::shape(
            "baseline score",
            format!("input has {} features, model expects {}", x.cols(), model.dim()),
        ));
    }
    Ok(to_rows(x).iter().map(|r| T::lit(model.score_row(r))).collect())
}
