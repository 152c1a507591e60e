//! Encoder + flow bundle, its scoring entry points, and the model file.
//!
//! Model file layout (little-endian):
//!
//! ```text
//! magic            8   b"FPGMODEL"
//! format_version   u32 (1)
//! -- encoder block
//! kind             u8  0 identity, 1 linear, 2 mlp
//! trainable        u8
//! reserved         u16
//! in_dim, out_dim, hidden          u32 x 3   (hidden = 0 unless mlp)
//! params           f64 ...  per affine map: weight (in x out, row-major), bias
//! -- flow block
//! dim, layers, hidden, conditioner_depth   u32 x 4
//! s_max            f64
//! base_id          u8  0 = standard normal
//! alternation      u8  0 = alternate halves, layer 0 transforms the second half
//! reserved         u16
//! params           f64 ...  per layer: scale net maps, then shift net maps
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderKind, EncoderModel};
use crate::error::{Error, Result};
use crate::flow::{Affine, BatchLikelihood, CouplingLayer, FlowModel, Mlp};
use crate::gradcore::{Eager, Graph};
use crate::params::Parameterized;
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 8] = b"FPGMODEL";
pub const MODEL_FORMAT_VERSION: u32 = 1;
const BASE_STANDARD_NORMAL: u8 = 0;
const ALTERNATE_SECOND_FIRST: u8 = 0;

/// The full scorer: `log p(E(x))` under the flow.
#[derive(Clone, Debug, PartialEq)]
pub struct Pipeline<T> {
    pub encoder: EncoderModel<T>,
    pub flow: FlowModel<T>,
}

/// Parameters of a [`Pipeline`] placed on a graph.
#[derive(Clone, Debug)]
pub struct BoundPipeline<V> {
    pub encoder: Vec<V>,
    pub flow: Vec<V>,
}

impl<T: Real> Pipeline<T> {
    pub fn new(encoder: EncoderModel<T>, flow: FlowModel<T>) -> Result<Self> {
        if encoder.out_dim() != flow.dim() {
            return Err(Error::shape(
                "pipeline",
                format!("encoder emits {} features, flow expects {}", encoder.out_dim(), flow.dim()),
            ));
        }
        Ok(Self { encoder, flow })
    }

    pub fn in_dim(&self) -> usize {
        self.encoder.in_dim()
    }

    /// Binds parameters; the encoder only tracks gradients when trainable.
    pub fn bind<G: Graph<T>>(&self, g: &mut G) -> BoundPipeline<G::Var> {
        BoundPipeline {
            encoder: self.encoder.bind(g, self.encoder.is_trainable()),
            flow: self.flow.bind(g, true),
        }
    }

    /// Per-sample log-likelihood column for a batch of raw inputs.
    pub fn log_prob_graph<G: Graph<T>>(&self, g: &mut G, bound: &BoundPipeline<G::Var>, x: &G::Var) -> Result<G::Var> {
        let e = self.encoder.encode_graph(g, &bound.encoder, x)?;
        self.flow.log_prob_graph(g, &bound.flow, &e)
    }

    pub fn log_likelihood_batch(&self, x: &Tensor<T>) -> Result<BatchLikelihood<T>> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape(
                "score",
                format!("input has {} features, model expects {}", x.cols(), self.in_dim()),
            ));
        }
        let mut g = Eager;
        let bound = BoundPipeline {
            encoder: self.encoder.bind(&mut g, false),
            flow: self.flow.bind(&mut g, false),
        };
        let values = self.log_prob_graph(&mut g, &bound, x)?.into_data();
        let flagged = values
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_finite())
            .map(|(i, _)| i)
            .collect();
        Ok(BatchLikelihood { values, flagged })
    }

    /// Anomaly scores `-log p(E(x))`. Rows whose likelihood is not finite get
    /// `+inf` so they rank as the most anomalous.
    pub fn anomaly_scores(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let ll = self.log_likelihood_batch(x)?;
        Ok(ll
            .values
            .into_iter()
            .map(|v| if v.is_finite() { -v } else { T::infinity() })
            .collect())
    }

    /// Trainable tensors in optimiser order: flow first, then the encoder when
    /// it is trainable.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.flow.params_mut();
        if self.encoder.is_trainable() {
            out.extend(self.encoder.params_mut());
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MODEL_MAGIC);
        put_u32(&mut w, MODEL_FORMAT_VERSION);

        let enc = &self.encoder;
        let kind = match enc.kind() {
            EncoderKind::Identity => 0u8,
            EncoderKind::Linear => 1,
            EncoderKind::Mlp => 2,
        };
        w.push(kind);
        w.push(u8::from(enc.is_trainable()));
        w.extend_from_slice(&0u16.to_le_bytes());
        let enc_hidden = if enc.kind() == EncoderKind::Mlp {
            enc.layers()[0].outputs()
        } else {
            0
        };
        for v in [enc.in_dim(), enc.out_dim(), enc_hidden] {
            put_u32(&mut w, v as u32);
        }
        for p in enc.params() {
            put_tensor(&mut w, p);
        }

        let flow = &self.flow;
        let (hidden, depth, s_max) = match flow.layers().first() {
            Some(l) => (
                l.scale_net().layers()[0].outputs(),
                l.scale_net().hidden_layers(),
                l.s_max().as_f64(),
            ),
            None => (0, 0, 0.0),
        };
        for v in [flow.dim(), flow.num_layers(), hidden, depth] {
            put_u32(&mut w, v as u32);
        }
        w.extend_from_slice(&s_max.to_le_bytes());
        w.push(BASE_STANDARD_NORMAL);
        w.push(ALTERNATE_SECOND_FIRST);
        w.extend_from_slice(&0u16.to_le_bytes());
        for p in flow.params() {
            put_tensor(&mut w, p);
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MODEL_MAGIC {
            return Err(Error::Data("not a model file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::Data(format!("unsupported model format version {version}")));
        }

        let kind = match r.u8()? {
            0 => EncoderKind::Identity,
            1 => EncoderKind::Linear,
            2 => EncoderKind::Mlp,
            k => return Err(Error::Data(format!("unknown encoder kind {k}"))),
        };
        let trainable = r.u8()? != 0;
        r.take(2)?;
        let (in_dim, out_dim, enc_hidden) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let encoder = match kind {
            EncoderKind::Identity => {
                if in_dim != out_dim {
                    return Err(Error::Data("identity encoder with in_dim != out_dim".into()));
                }
                EncoderModel::identity(in_dim)?
            }
            EncoderKind::Linear => {
                EncoderModel::from_parts(kind, vec![r.affine(in_dim, out_dim)?], trainable)?
            }
            EncoderKind::Mlp => {
                let first = r.affine(in_dim, enc_hidden)?;
                let second = r.affine(enc_hidden, out_dim)?;
                EncoderModel::from_parts(kind, vec![first, second], trainable)?
            }
        };

        let dim = r.u32()? as usize;
        let n_layers = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        let depth = r.u32()? as usize;
        let s_max = T::lit(r.f64()?);
        let base = r.u8()?;
        let alternation = r.u8()?;
        r.take(2)?;
        if base != BASE_STANDARD_NORMAL {
            return Err(Error::Data(format!("unknown base distribution id {base}")));
        }
        if alternation != ALTERNATE_SECOND_FIRST {
            return Err(Error::Data(format!("unknown alternation pattern {alternation}")));
        }
        if !dim.is_multiple_of(2) {
            return Err(Error::Data(format!("flow dimension {dim} is odd")));
        }
        let m = dim / 2;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let mut nets = Vec::with_capacity(2);
            for _ in 0..2 {
                let mut maps = Vec::with_capacity(depth + 1);
                let mut fan_in = m;
                for _ in 0..depth {
                    maps.push(r.affine(fan_in, hidden)?);
                    fan_in = hidden;
                }
                maps.push(r.affine(fan_in, m)?);
                nets.push(Mlp::from_layers(maps)?);
            }
            let shift = nets.pop().expect("two nets");
            let scale = nets.pop().expect("two nets");
            layers.push(CouplingLayer::new(scale, shift, i % 2 == 0, s_max)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Data(format!(
                "{} trailing bytes after the flow block",
                bytes.len() - r.pos
            )));
        }
        let flow = FlowModel::from_layers(dim, layers)?;
        Self::new(encoder, flow)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<T: Real>(w: &mut Vec<u8>, t: &Tensor<T>) {
    for v in t.data() {
        w.extend_from_slice(&v.as_f64().to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data("model file is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor<T: Real>(&mut self, rows: usize, cols: usize) -> Result<Tensor<T>> {
        let data = (0..rows * cols)
            .map(|_| self.f64().map(T::lit))
            .collect::<Result<Vec<_>>>()?;
        Tensor::new(rows, cols, data)
    }

    fn affine<T: Real>(&mut self, inputs: usize, outputs: usize) -> Result<Affine<T>> {
        let w = self.tensor(inputs, outputs)?;
        let b = self.tensor(1, outputs)?;
        Affine::new(w, b)
    }
}

/// Human-readable sidecar written next to a model file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub format_version: u32,
    pub encoder: crate::encoder::EncoderSpec,
    pub flow: crate::flow::FlowConfig,
    pub train: crate::training::TrainConfig,
    /// Margin in effect at the end of training, if the FP loss was used.
    pub epsilon: Option<f64>,
    pub best_epoch: usize,
    pub dataset_digest: String,
}

impl ModelMetadata {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn jittered(enc: EncoderModel<f64>) -> Pipeline<f64> {
        let mut flow = FlowModel::new(&FlowConfig {
            layers: 3,
            hidden: Some(5),
            ..FlowConfig::new(enc.out_dim())
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        flow.jitter(&mut rng, 0.3);
        Pipeline::new(enc, flow).unwrap()
    }

    #[test]
    fn file_round_trip_for_every_encoder_kind() {
        for enc in [
            EncoderModel::identity(4).unwrap(),
            EncoderModel::linear_identity(4).unwrap().with_trainable(true).unwrap(),
            EncoderModel::mlp(6, 7, 4, 2).unwrap(),
        ] {
            let p = jittered(enc);
            let back = Pipeline::<f64>::from_bytes(&p.to_bytes()).unwrap();
            assert_eq!(back, p);
        }
    }

    #[test]
    fn corrupt_files_rejected() {
        let p = jittered(EncoderModel::identity(2).unwrap());
        let bytes = p.to_bytes();
        assert!(Pipeline::<f64>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Pipeline::<f64>::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Pipeline::<f64>::from_bytes(&extra).is_err());
    }

    #[test]
    fn encoder_flow_dimension_mismatch_rejected() {
        let flow = FlowModel::<f64>::new(&FlowConfig::new(4)).unwrap();
        assert!(Pipeline::new(EncoderModel::identity(2).unwrap(), flow).is_err());
    }

    #[test]
    fn anomaly_score_is_negated_log_likelihood() {
        let p = jittered(EncoderModel::mlp(6, 7, 4, 2).unwrap());
        let x = Tensor::from_fn(5, 6, |r, c| (r as f64 - c as f64) * 0.3);
        let ll = p.log_likelihood_batch(&x).unwrap().values;
        let s = p.anomaly_scores(&x).unwrap();
        for (a, b) in ll.iter().zip(&s) {
            assert_eq!(-a, *b);
        }
    }
}
