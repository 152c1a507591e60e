//! Affine-coupling normalizing flow and its exact log-likelihood.
//!
//! A coupling layer copies one half of its input and applies
//! `exp(s) * (x + t)` to the other half, where `s` and `t` are small
//! perceptrons of the copied half. `s` is soft-clamped to `[-s_max, s_max]`.
//! Consecutive layers alternate which half is transformed; layer 0 transforms
//! the second half.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{Eager, Graph};
use crate::params::{uniform_init, Parameterized};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Dense layer `x W + b`. `W` is `in x out` and `b` is `1 x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Affine<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if bias.shape() != (1, weight.cols()) {
            return Err(Error::shape(
                "affine",
                format!(
                    "bias {}x{} does not match weight {}x{}",
                    bias.rows(),
                    bias.cols(),
                    weight.rows(),
                    weight.cols()
                ),
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(inputs, outputs),
            bias: Tensor::zeros(1, outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }
}

/// Perceptron with tanh between affine maps and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    layers: Vec<Affine<T>>,
}

impl<T: Real> Mlp<T> {
    pub fn from_layers(layers: Vec<Affine<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("an MLP needs at least one affine map".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::shape(
                    "mlp",
                    format!("{} outputs feed {} inputs", pair[0].outputs(), pair[1].inputs()),
                ));
            }
        }
        Ok(Self { layers })
    }

    /// `hidden_layers` tanh layers of width `hidden`; hidden weights and biases
    /// uniform `±1/sqrt(fan_in)`, output map zero so the net starts at 0.
    pub fn zero_output<R: rand::Rng>(
        inputs: usize,
        hidden: usize,
        outputs: usize,
        hidden_layers: usize,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden_layers + 1);
        let mut fan_in = inputs;
        for _ in 0..hidden_layers {
            layers.push(Affine {
                weight: uniform_init(fan_in, hidden, fan_in, rng),
                bias: uniform_init(1, hidden, fan_in, rng),
            });
            fan_in = hidden;
        }
        layers.push(Affine::zeros(fan_in, outputs));
        Self { layers }
    }

    pub fn layers(&self) -> &[Affine<T>] {
        &self.layers
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    fn param_count(&self) -> usize {
        2 * self.layers.len()
    }

    fn params(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flat_map(|a| [&a.weight, &a.bias])
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|a| [&mut a.weight, &mut a.bias])
    }
}

/// Evaluates an MLP whose parameters were bound on `g` as `[W0, b0, W1, b1, ..]`.
pub(crate) fn mlp_forward<T: Real, G: Graph<T>>(g: &mut G, params: &[G::Var], x: &G::Var) -> Result<G::Var> {
    let n = params.len() / 2;
    let mut h = x.clone();
    for (k, wb) in params.chunks(2).enumerate() {
        let lin = g.matmul(&h, &wb[0])?;
        h = g.add(&lin, &wb[1])?;
        if k + 1 < n {
            h = g.tanh(&h)?;
        }
    }
    Ok(h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingLayer<T> {
    scale_net: Mlp<T>,
    shift_net: Mlp<T>,
    transform_second_half: bool,
    s_max: T,
}

impl<T: Real> CouplingLayer<T> {
    pub fn new(scale_net: Mlp<T>, shift_net: Mlp<T>, transform_second_half: bool, s_max: T) -> Result<Self> {
        if !(s_max > T::zero()) || !s_max.is_finite() {
            return Err(Error::InvalidArgument(format!("s_max must be positive and finite, got {s_max}")));
        }
        let m = scale_net.inputs();
        for net in [&scale_net, &shift_net] {
            if net.inputs() != m || net.outputs() != m {
                return Err(Error::shape(
                    "coupling",
                    format!(
                        "conditioner maps {} -> {}, expected {m} -> {m}",
                        net.inputs(),
                        net.outputs()
                    ),
                ));
            }
        }
        Ok(Self {
            scale_net,
            shift_net,
            transform_second_half,
            s_max,
        })
    }

    /// Feature dimension `d = 2m`.
    pub fn dim(&self) -> usize {
        2 * self.half()
    }

    fn half(&self) -> usize {
        self.scale_net.inputs()
    }

    pub fn transforms_second_half(&self) -> bool {
        self.transform_second_half
    }

    pub fn s_max(&self) -> T {
        self.s_max
    }

    pub fn scale_net(&self) -> &Mlp<T> {
        &self.scale_net
    }

    pub fn shift_net(&self) -> &Mlp<T> {
        &self.shift_net
    }

    fn param_count(&self) -> usize {
        self.scale_net.param_count() + self.shift_net.param_count()
    }

    /// Column ranges of the (copied, transformed) halves.
    fn halves(&self) -> ((usize, usize), (usize, usize)) {
        let m = self.half();
        if self.transform_second_half {
            ((0, m), (m, 2 * m))
        } else {
            ((m, 2 * m), (0, m))
        }
    }

    fn conditioners<G: Graph<T>>(&self, g: &mut G, params: &[G::Var], pass: &G::Var) -> Result<(G::Var, G::Var)> {
        let split = self.scale_net.param_count();
        let raw = mlp_forward(g, &params[..split], pass)?;
        let bounded = g.tanh(&raw)?;
        let s = g.scale(&bounded, self.s_max)?;
        let t = mlp_forward(g, &params[split..], pass)?;
        Ok((s, t))
    }

    fn join<G: Graph<T>>(&self, g: &mut G, pass: &G::Var, moved: &G::Var) -> Result<G::Var> {
        if self.transform_second_half {
            g.concat(&[pass, moved])
        } else {
            g.concat(&[moved, pass])
        }
    }

    /// Batched forward pass on `g`: returns the output batch and the `n x 1`
    /// column of per-sample log-determinants.
    pub(crate) fn forward_graph<G: Graph<T>>(
        &self,
        g: &mut G,
        params: &[G::Var],
        x: &G::Var,
    ) -> Result<(G::Var, G::Var)> {
        let ((p0, p1), (q0, q1)) = self.halves();
        let pass = g.slice(x, p0, p1)?;
        let other = g.slice(x, q0, q1)?;
        let (s, t) = self.conditioners(g, params, &pass)?;
        let shifted = g.add(&other, &t)?;
        let growth = g.exp(&s)?;
        let moved = g.mul(&growth, &shifted)?;
        let out = self.join(g, &pass, &moved)?;
        let logdet = g.row_sum(&s)?;
        Ok((out, logdet))
    }

    fn inverse_graph<G: Graph<T>>(&self, g: &mut G, params: &[G::Var], y: &G::Var) -> Result<G::Var> {
        let ((p0, p1), (q0, q1)) = self.halves();
        let pass = g.slice(y, p0, p1)?;
        let other = g.slice(y, q0, q1)?;
        let (s, t) = self.conditioners(g, params, &pass)?;
        let neg = g.scale(&s, -T::one())?;
        let shrink = g.exp(&neg)?;
        let unscaled = g.mul(&shrink, &other)?;
        let moved = g.sub(&unscaled, &t)?;
        self.join(g, &pass, &moved)
    }

    fn check_batch(&self, x: &Tensor<T>) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::shape(
                "coupling",
                format!("input has {} features, layer expects {}", x.cols(), self.dim()),
            ));
        }
        Ok(())
    }

    /// Maps a batch forward; returns outputs and per-sample log-determinants.
    pub fn forward_batch(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        self.check_batch(x)?;
        let mut g = Eager;
        let params = self.bind(&mut g, false);
        let (y, ld) = self.forward_graph(&mut g, &params, x)?;
        Ok((y, ld.into_data()))
    }

    pub fn inverse_batch(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_batch(y)?;
        let mut g = Eager;
        let params = self.bind(&mut g, false);
        self.inverse_graph(&mut g, &params, y)
    }

    /// Single-vector forward: `(b, log|det db/da|)`.
    pub fn forward(&self, a: &[T]) -> Result<(Vec<T>, T)> {
        let (b, ld) = self.forward_batch(&Tensor::row(a))?;
        Ok((b.into_data(), ld[0]))
    }

    pub fn inverse(&self, b: &[T]) -> Result<Vec<T>> {
        Ok(self.inverse_batch(&Tensor::row(b))?.into_data())
    }
}

impl<T: Real> Parameterized<T> for CouplingLayer<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        self.scale_net.params().chain(self.shift_net.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.scale_net
            .params_mut()
            .chain(self.shift_net.params_mut())
            .collect()
    }
}

/// Architecture of a [`FlowModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub dim: usize,
    /// Number of coupling layers.
    pub layers: usize,
    /// Conditioner width; `None` means `max(8, dim / 4)`.
    pub hidden: Option<usize>,
    /// Hidden layers inside each conditioner.
    pub conditioner_depth: usize,
    pub s_max: f64,
    pub seed: u64,
}

impl FlowConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            layers: 32,
            hidden: None,
            conditioner_depth: 1,
            s_max: 2.0,
            seed: 0,
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden.unwrap_or_else(|| (self.dim / 4).max(8))
    }
}

/// Per-sample outcome of batched likelihood evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLikelihood<T> {
    pub values: Vec<T>,
    /// Rows whose log-likelihood was not finite.
    pub flagged: Vec<usize>,
}

/// Composition of coupling layers with a standard normal base distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel<T> {
    dim: usize,
    layers: Vec<CouplingLayer<T>>,
}

impl<T: Real> FlowModel<T> {
    /// Identity-initialised flow.
    pub fn new(cfg: &FlowConfig) -> Result<Self> {
        if cfg.dim < 2 || !cfg.dim.is_multiple_of(2) {
            return Err(Error::Config(format!("flow dimension must be even and >= 2, got {}", cfg.dim)));
        }
        if cfg.conditioner_depth == 0 {
            return Err(Error::Config("conditioner_depth must be at least 1".into()));
        }
        let m = cfg.dim / 2;
        let hidden = cfg.hidden_width();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let s_max = T::lit(cfg.s_max);
        let layers = (0..cfg.layers)
            .map(|i| {
                let s = Mlp::zero_output(m, hidden, m, cfg.conditioner_depth, &mut rng);
                let t = Mlp::zero_output(m, hidden, m, cfg.conditioner_depth, &mut rng);
                CouplingLayer::new(s, t, i % 2 == 0, s_max)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(cfg.dim, layers)
    }

    pub fn from_layers(dim: usize, layers: Vec<CouplingLayer<T>>) -> Result<Self> {
        if dim < 2 || !dim.is_multiple_of(2) {
            return Err(Error::Config(format!("flow dimension must be even and >= 2, got {dim}")));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.dim() != dim {
                return Err(Error::shape(
                    "flow",
                    format!("layer {i} has dimension {}, flow has {dim}", l.dim()),
                ));
            }
            if l.transforms_second_half() != (i % 2 == 0) {
                return Err(Error::Config(format!(
                    "layer {i} breaks the alternating half pattern"
                )));
            }
        }
        Ok(Self { dim, layers })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[CouplingLayer<T>] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn check_batch(&self, x: &Tensor<T>) -> Result<()> {
        if x.cols() != self.dim {
            return Err(Error::shape(
                "flow",
                format!("input has {} features, flow expects {}", x.cols(), self.dim),
            ));
        }
        Ok(())
    }

    /// `(z, total log-det)` on `g`. Log-dets are accumulated in layer order
    /// starting from zero.
    pub(crate) fn forward_graph<G: Graph<T>>(
        &self,
        g: &mut G,
        params: &[G::Var],
        x: &G::Var,
    ) -> Result<(G::Var, G::Var)> {
        let rows = g.value(x).rows();
        let mut total = g.constant(Tensor::zeros(rows, 1));
        let mut h = x.clone();
        let mut offset = 0;
        for layer in &self.layers {
            let k = layer.param_count();
            let (next, ld) = layer.forward_graph(g, &params[offset..offset + k], &h)?;
            total = g.add(&total, &ld)?;
            h = next;
            offset += k;
        }
        Ok((h, total))
    }

    /// Per-sample `log p(x)` as an `n x 1` column on `g`.
    pub(crate) fn log_prob_graph<G: Graph<T>>(&self, g: &mut G, params: &[G::Var], x: &G::Var) -> Result<G::Var> {
        let (z, logdet) = self.forward_graph(g, params, x)?;
        let sq = g.mul(&z, &z)?;
        let norm = g.row_sum(&sq)?;
        let base = g.scale(&norm, T::lit(-0.5))?;
        let lp = g.add(&base, &logdet)?;
        let c = g.constant(Tensor::scalar(log_normalizer(self.dim)));
        g.add(&lp, &c)
    }

    pub fn forward_batch(&self, e: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
        self.check_batch(e)?;
        let mut g = Eager;
        let params = self.bind(&mut g, false);
        let (z, ld) = self.forward_graph(&mut g, &params, e)?;
        Ok((z, ld.into_data()))
    }

    /// Per-layer log-dets of every row, layer-major.
    pub fn layer_logdets(&self, e: &Tensor<T>) -> Result<Vec<Vec<T>>> {
        self.check_batch(e)?;
        let mut h = e.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, ld) = layer.forward_batch(&h)?;
            out.push(ld);
            h = next;
        }
        Ok(out)
    }

    pub fn inverse_batch(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_batch(z)?;
        let mut g = Eager;
        let mut h = z.clone();
        for layer in self.layers.iter().rev() {
            let params = layer.bind(&mut g, false);
            h = layer.inverse_graph(&mut g, &params, &h)?;
        }
        Ok(h)
    }

    pub fn forward(&self, e: &[T]) -> Result<(Vec<T>, T)> {
        let (z, ld) = self.forward_batch(&Tensor::row(e))?;
        Ok((z.into_data(), ld[0]))
    }

    pub fn inverse(&self, z: &[T]) -> Result<Vec<T>> {
        Ok(self.inverse_batch(&Tensor::row(z))?.into_data())
    }

    /// `log N(z; 0, I) + log|det dz/de|`. Non-finite results are errors.
    pub fn log_likelihood(&self, e: &[T]) -> Result<T> {
        let out = self.log_likelihood_batch(&Tensor::row(e))?;
        if out.flagged.is_empty() {
            Ok(out.values[0])
        } else {
            Err(Error::Numeric(format!("log-likelihood is {}", out.values[0])))
        }
    }

    /// Batched log-likelihood. Non-finite rows are reported in `flagged`
    /// instead of failing the batch.
    pub fn log_likelihood_batch(&self, e: &Tensor<T>) -> Result<BatchLikelihood<T>> {
        self.check_batch(e)?;
        let mut g = Eager;
        let params = self.bind(&mut g, false);
        let values = self.log_prob_graph(&mut g, &params, e)?.into_data();
        let flagged = values
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_finite())
            .map(|(i, _)| i)
            .collect();
        Ok(BatchLikelihood { values, flagged })
    }

    /// Draws `n` base samples with a seeded generator and inverts them.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Tensor<T>> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample count must be at least 1".into()));
        }
        let z = standard_normal_batch(n, self.dim, seed);
        self.inverse_batch(&z)
    }
}

impl<T: Real> Parameterized<T> for FlowModel<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// `-(d/2) log(2 pi)`.
pub fn log_normalizer<T: Real>(dim: usize) -> T {
    T::lit(-0.5 * dim as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// `n x d` standard normal draws from a ChaCha8 stream seeded with `seed`.
pub fn standard_normal_batch<T: Real>(n: usize, d: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(n, d, |_, _| {
        let v: f64 = StandardNormal.sample(&mut rng);
        T::lit(v)
    })
}
