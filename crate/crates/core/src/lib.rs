//! Likelihood-based false-positive rejection for detector outputs.
//!
//! A normalizing flow built from affine coupling layers learns the density of
//! true-positive feature vectors; detections whose negative log-likelihood
//! exceeds a threshold are rejected. Optional outlier exposure pushes known
//! false positives below a likelihood margin, optionally while finetuning a
//! small feature adapter jointly with the flow.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`). The aliases
//! at the crate root fix the scalar to `f64`, which the accuracy guarantees
//! assume.

pub mod baselines;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod flow;
pub mod gradcore;
mod linalg;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use dataio::{Dataset, Label, Sample};
pub use encoder::{EncoderKind, EncoderModel, EncoderSpec};
pub use error::{Error, Result};
pub use flow::{CouplingLayer, FlowConfig, FlowModel};
pub use gradcore::{Eager, Graph, NodeId, Op, Tape};
pub use model::{ModelMetadata, Pipeline};
pub use params::Parameterized;
pub use scalar::Real;
pub use tensor::Tensor;
pub use training::{train, TrainConfig, TrainOutcome, TrainSet, TrainTrace, ValidationSet, Variant};

pub type Tensor64 = Tensor<f64>;
pub type Tape64 = Tape<f64>;
pub type CouplingLayer64 = CouplingLayer<f64>;
pub type FlowModel64 = FlowModel<f64>;
pub type EncoderModel64 = EncoderModel<f64>;
pub type Pipeline64 = Pipeline<f64>;
pub type TrainSet64 = TrainSet<f64>;
pub type ValidationSet64 = ValidationSet<f64>;
pub type TrainOutcome64 = TrainOutcome<f64>;
