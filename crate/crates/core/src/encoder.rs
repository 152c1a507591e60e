//! Feature adapter placed in front of the flow.
//!
//! Three kinds exist: `identity` (no parameters), `linear` (`x W + b`) and
//! `mlp` (`in -> hidden (tanh) -> out`). A frozen encoder never changes during
//! training; a trainable one is optimised jointly with the flow.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{mlp_forward, Affine};
use crate::gradcore::{Eager, Graph};
use crate::linalg::{mean_and_covariance, sorted_eigen};
use crate::params::{uniform_init, Parameterized};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Identity,
    Linear,
    Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel<T> {
    kind: EncoderKind,
    in_dim: usize,
    out_dim: usize,
    /// Affine maps; empty for identity, one for linear, two for mlp.
    layers: Vec<Affine<T>>,
    trainable: bool,
}

impl<T: Real> EncoderModel<T> {
    pub fn identity(dim: usize) -> Result<Self> {
        check_out_dim(dim)?;
        Ok(Self {
            kind: EncoderKind::Identity,
            in_dim: dim,
            out_dim: dim,
            layers: Vec::new(),
            trainable: false,
        })
    }

    pub fn linear(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let affine = Affine::new(weight, bias)?;
        check_out_dim(affine.outputs())?;
        Ok(Self {
            kind: EncoderKind::Linear,
            in_dim: affine.inputs(),
            out_dim: affine.outputs(),
            layers: vec![affine],
            trainable: false,
        })
    }

    /// Linear encoder that starts as the identity map.
    pub fn linear_identity(dim: usize) -> Result<Self> {
        Self::linear(Tensor::identity(dim), Tensor::zeros(1, dim))
    }

    /// Per-feature standardisation fitted on `data` rows.
    pub fn standardize(data: &Tensor<T>) -> Result<Self> {
        let rows = to_f64_rows(data);
        let (mean, cov) = mean_and_covariance(&rows)?;
        let d = mean.len();
        let inv_sd: Vec<f64> = (0..d).map(|i| 1.0 / cov[(i, i)].sqrt().max(1e-12)).collect();
        let weight = Tensor::from_fn(d, d, |r, c| if r == c { T::lit(inv_sd[r]) } else { T::zero() });
        let bias = Tensor::from_fn(1, d, |_, c| T::lit(-mean[c] * inv_sd[c]));
        Self::linear(weight, bias)
    }

    /// Whitened projection onto the top `out_dim` principal directions of
    /// `data`.
    pub fn pca_whiten(data: &Tensor<T>, out_dim: usize) -> Result<Self> {
        check_out_dim(out_dim)?;
        let rows = to_f64_rows(data);
        let (mean, cov) = mean_and_covariance(&rows)?;
        if out_dim > mean.len() {
            return Err(Error::Config(format!(
                "cannot project {} features onto {out_dim} components",
                mean.len()
            )));
        }
        let pairs = sorted_eigen(&cov);
        let d = mean.len();
        let cols: Vec<Vec<f64>> = pairs[..out_dim]
            .iter()
            .map(|(lambda, v)| {
                let s = 1.0 / lambda.max(1e-12).sqrt();
                v.iter().map(|x| x * s).collect()
            })
            .collect();
        let weight = Tensor::from_fn(d, out_dim, |r, c| T::lit(cols[c][r]));
        let bias = Tensor::from_fn(1, out_dim, |_, c| {
            T::lit(-(0..d).map(|r| mean[r] * cols[c][r]).sum::<f64>())
        });
        Self::linear(weight, bias)
    }

    /// `in -> hidden (tanh) -> out` with seeded uniform `±1/sqrt(fan_in)` weights.
    pub fn mlp(in_dim: usize, hidden: usize, out_dim: usize, seed: u64) -> Result<Self> {
        check_out_dim(out_dim)?;
        if in_dim == 0 || hidden == 0 {
            return Err(Error::Config("mlp encoder dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = vec![
            Affine {
                weight: uniform_init(in_dim, hidden, in_dim, &mut rng),
                bias: uniform_init(1, hidden, in_dim, &mut rng),
            },
            Affine {
                weight: uniform_init(hidden, out_dim, hidden, &mut rng),
                bias: uniform_init(1, out_dim, hidden, &mut rng),
            },
        ];
        Self::from_parts(EncoderKind::Mlp, layers, false)
    }

    /// Reassembles an encoder from its affine maps (used by model loading).
    pub fn from_parts(kind: EncoderKind, layers: Vec<Affine<T>>, trainable: bool) -> Result<Self> {
        let expected = match kind {
            EncoderKind::Identity => 0,
            EncoderKind::Linear => 1,
            EncoderKind::Mlp => 2,
        };
        if layers.len() != expected {
            return Err(Error::Data(format!(
                "{kind:?} encoder needs {expected} affine maps, got {}",
                layers.len()
            )));
        }
        if kind == EncoderKind::Identity {
            return Err(Error::InvalidArgument("use EncoderModel::identity".into()));
        }
        if layers.len() == 2 && layers[0].outputs() != layers[1].inputs() {
            return Err(Error::shape("encoder", "hidden widths disagree"));
        }
        let in_dim = layers[0].inputs();
        let out_dim = layers[layers.len() - 1].outputs();
        check_out_dim(out_dim)?;
        Ok(Self {
            kind,
            in_dim,
            out_dim,
            layers,
            trainable,
        })
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn layers(&self) -> &[Affine<T>] {
        &self.layers
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Identity encoders have nothing to train, so they stay frozen.
    pub fn set_trainable(&mut self, trainable: bool) -> Result<()> {
        if trainable && self.kind == EncoderKind::Identity {
            return Err(Error::Config("an identity encoder has no parameters to train".into()));
        }
        self.trainable = trainable;
        Ok(())
    }

    pub fn with_trainable(mut self, trainable: bool) -> Result<Self> {
        self.set_trainable(trainable)?;
        Ok(self)
    }

    pub(crate) fn encode_graph<G: Graph<T>>(&self, g: &mut G, params: &[G::Var], x: &G::Var) -> Result<G::Var> {
        match self.kind {
            EncoderKind::Identity => Ok(x.clone()),
            _ => mlp_forward(g, params, x),
        }
    }

    fn check_batch(&self, x: &Tensor<T>) -> Result<()> {
        if x.cols() != self.in_dim {
            return Err(Error::shape(
                "encode",
                format!("input has {} features, encoder expects {}", x.cols(), self.in_dim),
            ));
        }
        Ok(())
    }

    pub fn encode_batch(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_batch(x)?;
        let mut g = Eager;
        let params = self.bind(&mut g, false);
        self.encode_graph(&mut g, &params, x)
    }

    pub fn encode(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.encode_batch(&Tensor::row(x))?.into_data())
    }
}

impl<T: Real> Parameterized<T> for EncoderModel<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|a| [&a.weight, &a.bias]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|a| [&mut a.weight, &mut a.bias])
            .collect()
    }
}

fn check_out_dim(out_dim: usize) -> Result<()> {
    if out_dim == 0 || !out_dim.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "encoder output dimension must be even and positive, got {out_dim}"
        )));
    }
    Ok(())
}

fn to_f64_rows<T: Real>(x: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..x.rows())
        .map(|r| x.row_slice(r).iter().map(|v| v.as_f64()).collect())
        .collect()
}

/// How an experiment builds its encoder from the training TPs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSpec {
    Identity,
    /// Linear map initialised to the identity.
    Linear,
    /// Linear map initialised to per-feature standardisation.
    Standardize,
    /// Linear map initialised to a whitened PCA projection.
    Pca { dim: usize },
    /// `in -> hidden (tanh) -> dim`; `hidden` defaults to `2 * dim`.
    Mlp { dim: usize, hidden: Option<usize> },
}

impl EncoderSpec {
    pub fn out_dim(&self, in_dim: usize) -> usize {
        match self {
            EncoderSpec::Identity | EncoderSpec::Linear | EncoderSpec::Standardize => in_dim,
            EncoderSpec::Pca { dim } | EncoderSpec::Mlp { dim, .. } => *dim,
        }
    }

    /// The spec to use when the encoder must be trainable: `identity` has no
    /// parameters, so it becomes an identity-initialised linear map.
    pub fn trainable_form(&self) -> EncoderSpec {
        match self {
            EncoderSpec::Identity => EncoderSpec::Linear,
            s => s.clone(),
        }
    }

    /// Builds a frozen encoder; `train_tp` supplies statistics for the
    /// data-dependent initialisations.
    pub fn build<T: Real>(&self, train_tp: &Tensor<T>, seed: u64) -> Result<EncoderModel<T>> {
        let d = train_tp.cols();
        match self {
            EncoderSpec::Identity => EncoderModel::identity(d),
            EncoderSpec::Linear => EncoderModel::linear_identity(d),
            EncoderSpec::Standardize => EncoderModel::standardize(train_tp),
            EncoderSpec::Pca { dim } => EncoderModel::pca_whiten(train_tp, *dim),
            EncoderSpec::Mlp { dim, hidden } => EncoderModel::mlp(d, hidden.unwrap_or(2 * dim), *dim, seed),
        }
    }
}
