use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::gradcore::Graph;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Anything holding trainable tensors in a fixed canonical order.
pub trait Parameterized<T: Real> {
    fn params(&self) -> Vec<&Tensor<T>>;

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Puts every parameter on `g`, in canonical order.
    fn bind<G: Graph<T>>(&self, g: &mut G, requires_grad: bool) -> Vec<G::Var> {
        self.params()
            .into_iter()
            .map(|p| g.input(p.clone(), requires_grad))
            .collect()
    }

    /// Adds uniform noise in `[-scale, scale]` to every parameter. Used to
    /// move away from the identity initialisation in tests and oracles.
    fn jitter<R: Rng>(&mut self, rng: &mut R, scale: f64) {
        let dist = Uniform::new_inclusive(-scale, scale).expect("valid jitter range");
        for p in self.params_mut() {
            for v in p.data_mut() {
                *v = *v + T::lit(dist.sample(rng));
            }
        }
    }
}

/// Seeded uniform `±1/sqrt(fan_in)` matrix.
pub(crate) fn uniform_init<T: Real, R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid init range");
    Tensor::from_fn(rows, cols, |_, _| T::lit(dist.sample(rng)))
}
