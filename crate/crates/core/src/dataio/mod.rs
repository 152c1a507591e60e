//! Detection datasets: validated containers, file formats and the synthetic
//! generator.

mod files;
pub mod synth;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub use files::{load_dataset, save_dataset, sha256_hex, Manifest, PayloadFormat, MANIFEST_SCHEMA_VERSION};

/// Ground truth of one detection. `Fp` is the positive class for all metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "TP")]
    Tp,
    #[serde(rename = "FP")]
    Fp,
}

impl Label {
    pub fn is_fp(self) -> bool {
        self == Label::Fp
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Tp => "TP",
            Label::Fp => "FP",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "TP" => Some(Label::Tp),
            "FP" => Some(Label::Fp),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub features: Vec<f64>,
    pub label: Label,
    /// Index into the dataset's class table; `Some` exactly for FPs.
    pub fp_class: Option<usize>,
}

/// Immutable, validated collection of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    d_in: usize,
    class_names: Vec<String>,
    provenance: String,
}

impl Dataset {
    /// Validates and wraps `samples`. `provenance` is a digest of the source;
    /// when empty the content digest is used.
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>, provenance: impl Into<String>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::Data("dataset has no samples".into()));
        };
        let d_in = first.features.len();
        if d_in == 0 {
            return Err(Error::Data("feature vectors are empty".into()));
        }
        let mut seen = HashSet::with_capacity(samples.len());
        let mut names = HashSet::new();
        for n in &class_names {
            if n.is_empty() || !names.insert(n.as_str()) {
                return Err(Error::Data(format!("class table has an empty or repeated name {n:?}")));
            }
        }
        for (row, s) in samples.iter().enumerate() {
            if s.features.len() != d_in {
                return Err(Error::Data(format!(
                    "row {row}: {} features, expected {d_in}",
                    s.features.len()
                )));
            }
            if let Some(col) = s.features.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data(format!("row {row}: feature f{col} is not finite")));
            }
            match (s.label, s.fp_class) {
                (Label::Tp, Some(_)) => {
                    return Err(Error::Data(format!("row {row}: TP sample carries a class tag")))
                }
                (Label::Fp, None) => return Err(Error::Data(format!("row {row}: FP sample has no class tag"))),
                (Label::Fp, Some(c)) if c >= class_names.len() => {
                    return Err(Error::Data(format!("row {row}: class index {c} is not in the class table")))
                }
                _ => {}
            }
            if !seen.insert(s.id) {
                return Err(Error::Data(format!("row {row}: duplicate sample id {}", s.id)));
            }
        }
        let mut ds = Self {
            samples,
            d_in,
            class_names,
            provenance: provenance.into(),
        };
        if ds.provenance.is_empty() {
            ds.provenance = ds.content_digest();
        }
        Ok(ds)
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn count(&self, label: Label) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }

    pub fn indices_where(&self, pred: impl Fn(&Sample) -> bool) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| pred(s))
            .map(|(i, _)| i)
            .collect()
    }

    /// Feature rows of `idx` as an `n x d_in` matrix.
    pub fn features<T: Real>(&self, idx: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(idx.len() * self.d_in);
        for &i in idx {
            data.extend(self.samples[i].features.iter().map(|&v| T::lit(v)));
        }
        Tensor::new(idx.len(), self.d_in, data).expect("rows have d_in features")
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<Label> {
        idx.iter().map(|&i| self.samples[i].label).collect()
    }

    pub fn classes(&self, idx: &[usize]) -> Vec<Option<usize>> {
        idx.iter().map(|&i| self.samples[i].fp_class).collect()
    }

    /// Sorts `idx` by sample id so downstream results do not depend on
    /// storage order.
    pub fn sort_by_id(&self, idx: &mut [usize]) {
        idx.sort_by_key(|&i| self.samples[i].id);
    }

    /// Copy with samples in the given order (a permutation or subset).
    pub fn reordered(&self, order: &[usize]) -> Self {
        Self {
            samples: order.iter().map(|&i| self.samples[i].clone()).collect(),
            d_in: self.d_in,
            class_names: self.class_names.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// SHA-256 over ids, labels, classes and feature bits, in id order.
    pub fn content_digest(&self) -> String {
        let mut idx: Vec<usize> = (0..self.samples.len()).collect();
        self.sort_by_id(&mut idx);
        let mut h = Sha256::new();
        h.update((self.d_in as u64).to_le_bytes());
        for n in &self.class_names {
            h.update(n.as_bytes());
            h.update([0u8]);
        }
        for i in idx {
            let s = &self.samples[i];
            h.update(s.id.to_le_bytes());
            h.update([s.label as u8]);
            h.update((s.fp_class.map_or(-1, |c| c as i64)).to_le_bytes());
            for v in &s.features {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
