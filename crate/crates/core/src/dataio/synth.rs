//! Seeded synthetic TP/FP feature data.
//!
//! TPs come from a Gaussian mixture in a 2-D latent plane. Each FP class has
//! its own planar shape, optionally pushed off the plane along a third
//! direction. Plane and off-plane directions are embedded into `d_in`
//! dimensions by an orthonormal lift, then isotropic noise is added.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::{Dataset, Label, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lift {
    /// Seeded random orthonormal directions.
    Random,
    /// Plane on axes 0 and 1, off-plane direction on axis 2.
    Axes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mean: [f64; 2],
    /// Row-major 2x2 covariance.
    pub cov: [[f64; 2]; 2],
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FpShape {
    /// Isotropic Gaussian at `shift` with standard deviation `scale`.
    Gaussian,
    /// Annulus around `shift` with radius `scale`.
    Ring,
    /// Uniform square around `shift` with half-width `scale`.
    UniformBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpClassSpec {
    pub name: String,
    pub shape: FpShape,
    pub shift: [f64; 2],
    pub scale: f64,
    /// Radial standard deviation of rings; defaults to `scale / 20`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ring_width: Option<f64>,
    /// Offset along the off-plane direction.
    #[serde(default)]
    pub off_plane: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub d_in: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub lift: Lift,
    pub tp_components: Vec<Component>,
    pub tp_count: usize,
    pub fp_classes: Vec<FpClassSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Default,
    /// FP classes far from the TP manifold.
    Easy,
    /// FP classes about one TP standard deviation away.
    Hard,
    /// FPs share the TP plane and differ only off-plane.
    Confounded,
}

fn iso(mean: [f64; 2], sd: f64) -> Component {
    Component {
        mean,
        cov: [[sd * sd, 0.0], [0.0, sd * sd]],
        weight: 1.0,
    }
}

fn fp(name: &str, shape: FpShape, shift: [f64; 2], scale: f64, off_plane: f64, count: usize) -> FpClassSpec {
    FpClassSpec {
        name: name.to_string(),
        shape,
        shift,
        scale,
        ring_width: None,
        off_plane,
        count,
    }
}

impl SynthSpec {
    /// Built-in specs. The TP mixture has three unit-variance components; FP
    /// offsets are expressed in units of that standard deviation.
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let components = vec![iso([-3.0, 0.0], 1.0), iso([3.0, 0.0], 1.0), iso([0.0, 4.0], 1.0)];
        let centroid = [0.0, 4.0 / 3.0];
        let (d_in, tp_count, fp_classes) = match preset {
            Preset::Default => (
                16,
                2000,
                vec![
                    fp("near", FpShape::Gaussian, [-3.0, -3.0], 1.0, 0.0, 300),
                    fp("ring", FpShape::Ring, centroid, 8.0, 0.0, 300),
                    fp("box", FpShape::UniformBox, centroid, 4.0, 4.0, 300),
                ],
            ),
            Preset::Easy => (
                16,
                2000,
                vec![
                    fp("near", FpShape::Gaussian, [-3.0, -6.0], 1.0, 0.0, 300),
                    fp("ring", FpShape::Ring, centroid, 11.0, 0.0, 300),
                    fp("box", FpShape::UniformBox, centroid, 4.0, 6.0, 300),
                ],
            ),
            Preset::Hard => (
                16,
                2000,
                vec![
                    fp("near", FpShape::Gaussian, [-3.0, -1.0], 0.3, 0.0, 300),
                    fp("ring", FpShape::Ring, [3.0, 0.0], 1.0, 0.0, 300),
                    fp("box", FpShape::UniformBox, [0.0, 5.0], 0.4, 0.5, 300),
                ],
            ),
            Preset::Confounded => (
                8,
                2000,
                vec![
                    fp("shadow", FpShape::Gaussian, [-3.0, 0.0], 1.0, 1.0, 300),
                    fp("glare", FpShape::Gaussian, [3.0, 0.0], 1.0, 1.0, 300),
                    fp("fold", FpShape::Gaussian, [0.0, 4.0], 1.0, 1.0, 300),
                ],
            ),
        };
        Self {
            d_in,
            seed,
            noise_sigma: 0.5,
            lift: Lift::Random,
            tp_components: components,
            tp_count,
            fp_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_in < 2 {
            return fail(format!("d_in must be at least 2, got {}", self.d_in));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma must be finite and non-negative, got {}", self.noise_sigma));
        }
        if self.tp_components.is_empty() || self.tp_count == 0 {
            return fail("at least one TP component and one TP sample are required".into());
        }
        for (i, c) in self.tp_components.iter().enumerate() {
            if !(c.weight > 0.0) || cholesky2(&c.cov).is_none() {
                return fail(format!("TP component {i} needs a positive weight and a positive definite covariance"));
            }
        }
        for c in &self.fp_classes {
            if c.count == 0 {
                return fail(format!("FP class {:?} has count 0", c.name));
            }
            if !(c.scale >= 0.0 && c.scale.is_finite()) {
                return fail(format!("FP class {:?} has an invalid scale", c.name));
            }
            if c.off_plane != 0.0 && self.d_in < 3 {
                return fail(format!("FP class {:?} is off-plane but d_in < 3", c.name));
            }
        }
        Ok(())
    }
}

fn cholesky2(c: &[[f64; 2]; 2]) -> Option<[[f64; 2]; 2]> {
    if c[0][1] != c[1][0] || !(c[0][0] > 0.0) {
        return None;
    }
    let l00 = c[0][0].sqrt();
    let l10 = c[1][0] / l00;
    let rest = c[1][1] - l10 * l10;
    if !(rest > 0.0) {
        return None;
    }
    Some([[l00, 0.0], [l10, rest.sqrt()]])
}

/// Orthonormal columns (plane u, plane v, off-plane w) of length `d`. The third
/// column is absent when `d == 2`.
pub fn lift_basis<R: Rng>(lift: Lift, d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let k = d.min(3);
    match lift {
        Lift::Axes => (0..k)
            .map(|j| (0..d).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
            .collect(),
        Lift::Random => {
            let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
            while basis.len() < k {
                let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                for b in &basis {
                    let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-8 {
                    v.iter_mut().for_each(|x| *x /= norm);
                    basis.push(v);
                }
            }
            basis
        }
    }
}

/// Generates the dataset: TPs first (ids `0..tp_count`), then each FP class in
/// declaration order.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let basis = lift_basis(spec.lift, spec.d_in, &mut rng);
    let d = spec.d_in;
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let embed = |p: [f64; 2], off: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..d)
            .map(|i| {
                let mut v = p[0] * basis[0][i] + p[1] * basis[1][i];
                if off != 0.0 {
                    v += off * basis[2][i];
                }
                v + spec.noise_sigma * normal(rng)
            })
            .collect()
    };

    let total_w: f64 = spec.tp_components.iter().map(|c| c.weight).sum();
    let chols: Vec<[[f64; 2]; 2]> = spec
        .tp_components
        .iter()
        .map(|c| cholesky2(&c.cov).expect("validated"))
        .collect();
    let unit = Uniform::new(0.0, 1.0).expect("valid range");
    let mut samples = Vec::with_capacity(spec.tp_count + spec.fp_classes.iter().map(|c| c.count).sum::<usize>());
    let mut id = 0u64;

    for _ in 0..spec.tp_count {
        let mut u = unit.sample(&mut rng) * total_w;
        let mut k = spec.tp_components.len() - 1;
        for (j, c) in spec.tp_components.iter().enumerate() {
            if u < c.weight {
                k = j;
                break;
            }
            u -= c.weight;
        }
        let (n0, n1) = (normal(&mut rng), normal(&mut rng));
        let l = &chols[k];
        let m = spec.tp_components[k].mean;
        let p = [m[0] + l[0][0] * n0, m[1] + l[1][0] * n0 + l[1][1] * n1];
        samples.push(Sample {
            id,
            features: embed(p, 0.0, &mut rng),
            label: Label::Tp,
            fp_class: None,
        });
        id += 1;
    }

    let sym = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
    for (ci, c) in spec.fp_classes.iter().enumerate() {
        for _ in 0..c.count {
            let p = match c.shape {
                FpShape::Gaussian => [
                    c.shift[0] + c.scale * normal(&mut rng),
                    c.shift[1] + c.scale * normal(&mut rng),
                ],
                FpShape::Ring => {
                    let theta = unit.sample(&mut rng) * std::f64::consts::TAU;
                    let width = c.ring_width.unwrap_or(c.scale / 20.0);
                    let r = c.scale + width * normal(&mut rng);
                    [c.shift[0] + r * theta.cos(), c.shift[1] + r * theta.sin()]
                }
                FpShape::UniformBox => [
                    c.shift[0] + c.scale * sym.sample(&mut rng),
                    c.shift[1] + c.scale * sym.sample(&mut rng),
                ],
            };
            samples.push(Sample {
                id,
                features: embed(p, c.off_plane, &mut rng),
                label: Label::Fp,
                fp_class: Some(ci),
            });
            id += 1;
        }
    }
    let names = spec.fp_classes.iter().map(|c| c.name.clone()).collect();
    Dataset::new(samples, names, "")
}

/// Classic two-moons point cloud, standardised to roughly unit scale.
pub fn two_moons(n: usize, noise: f64, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Uniform::new(0.0, 1.0).expect("valid range");
    (0..n)
        .map(|i| {
            let t = unit.sample(&mut rng) * std::f64::consts::PI;
            let (x, y) = if i % 2 == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            let nx: f64 = StandardNormal.sample(&mut rng);
            let ny: f64 = StandardNormal.sample(&mut rng);
            // centre (0.5, 0.25), scale so the cloud spans about [-2, 2]
            [(x + noise * nx - 0.5) * 1.6, (y + noise * ny - 0.25) * 1.6]
        })
        .collect()
}
