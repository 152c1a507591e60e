//! Manifest plus payload on disk.
//!
//! The manifest is JSON. The payload is either CSV with header
//! `id,label,fp_class,f0..f{d-1}` or a little-endian binary file:
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"FPGFEAT\0"
//! 8       4     u32 format version (1)
//! 12      4     u32 reserved (0)
//! 16      8     u64 sample count n
//! 24      8     u64 feature dimension d
//! 32      ...   n rows of (d + 3) f64: id, label (0 TP / 1 FP),
//!               class index (-1 for TP), f0 .. f{d-1}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, Label, Sample};
use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
const BIN_MAGIC: &[u8; 8] = b"FPGFEAT\0";
const BIN_VERSION: u32 = 1;
const BIN_HEADER: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PayloadFormat {
    Csv,
    Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub d_in: usize,
    pub n_samples: usize,
    pub class_names: Vec<String>,
    pub format: PayloadFormat,
    /// Payload path relative to the manifest's directory.
    pub payload: String,
    /// Lower-case hex SHA-256 of the payload bytes.
    pub sha256: String,
}

/// Lower-case hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `<stem>.csv` or `<stem>.bin` next to `manifest_path`, then the
/// manifest itself.
pub fn save_dataset(ds: &Dataset, manifest_path: &Path, format: PayloadFormat) -> Result<Manifest> {
    let stem = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("bad manifest path {}", manifest_path.display())))?;
    let payload_name = match format {
        PayloadFormat::Csv => format!("{stem}.csv"),
        PayloadFormat::Binary => format!("{stem}.bin"),
    };
    let bytes = match format {
        PayloadFormat::Csv => encode_csv(ds)?,
        PayloadFormat::Binary => encode_binary(ds),
    };
    let dir = parent_dir(manifest_path);
    fs::write(dir.join(&payload_name), &bytes)?;
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        d_in: ds.d_in(),
        n_samples: ds.len(),
        class_names: ds.class_names().to_vec(),
        format,
        payload: payload_name,
        sha256: sha256_hex(&bytes),
    };
    fs::write(manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Loads and validates a dataset. The payload digest must match the manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("manifest {}: {e}", manifest_path.display())))?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::Data(format!(
            "unsupported manifest schema version {}",
            manifest.schema_version
        )));
    }
    let bytes = fs::read(parent_dir(manifest_path).join(&manifest.payload))?;
    let digest = sha256_hex(&bytes);
    if digest != manifest.sha256.to_ascii_lowercase() {
        return Err(Error::Data(format!(
            "payload digest {digest} does not match manifest {}",
            manifest.sha256
        )));
    }
    let samples = match manifest.format {
        PayloadFormat::Csv => decode_csv(&bytes, &manifest)?,
        PayloadFormat::Binary => decode_binary(&bytes, &manifest)?,
    };
    if samples.len() != manifest.n_samples {
        return Err(Error::Data(format!(
            "manifest declares {} samples, payload has {}",
            manifest.n_samples,
            samples.len()
        )));
    }
    let ds = Dataset::new(samples, manifest.class_names.clone(), digest)?;
    if ds.d_in() != manifest.d_in {
        return Err(Error::Data(format!(
            "manifest declares d_in={}, payload has {}",
            manifest.d_in,
            ds.d_in()
        )));
    }
    Ok(ds)
}

fn parent_dir(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn encode_csv(ds: &Dataset) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string(), "label".into(), "fp_class".into()];
    header.extend((0..ds.d_in()).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for s in ds.samples() {
        let mut rec = vec![
            s.id.to_string(),
            s.label.as_str().to_string(),
            s.fp_class.map(|c| ds.class_names()[c].clone()).unwrap_or_default(),
        ];
        // `Display` for f64 is the shortest exact round-trip form.
        rec.extend(s.features.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn decode_csv(bytes: &[u8], manifest: &Manifest) -> Result<Vec<Sample>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers()?.clone();
    let d = header.len().saturating_sub(3);
    let expected_prefix = ["id", "label", "fp_class"];
    let ok = header.len() >= 4
        && header.iter().take(3).eq(expected_prefix)
        && header.iter().skip(3).enumerate().all(|(i, h)| h == format!("f{i}"));
    if !ok {
        return Err(Error::Data("CSV header must be id,label,fp_class,f0..f{d-1}".into()));
    }
    let mut samples = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: String| Error::Data(format!("row {row}: {what}"));
        let id: u64 = rec[0].parse().map_err(|_| bad(format!("id {:?} is not an integer", &rec[0])))?;
        let label = Label::parse(&rec[1]).ok_or_else(|| bad(format!("label {:?} is not TP or FP", &rec[1])))?;
        let fp_class = match (&rec[2], label) {
            ("", Label::Tp) => None,
            ("", Label::Fp) => return Err(bad("FP sample has no class tag".into())),
            (name, Label::Fp) => Some(
                manifest
                    .class_names
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| bad(format!("class {name:?} is not in the manifest class table")))?,
            ),
            (_, Label::Tp) => return Err(bad("TP sample carries a class tag".into())),
        };
        let features = (0..d)
            .map(|j| {
                let v: f64 = rec[3 + j]
                    .parse()
                    .map_err(|_| bad(format!("feature f{j} {:?} is not a number", &rec[3 + j])))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(bad(format!("feature f{j} is not finite")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            id,
            features,
            label,
            fp_class,
        });
    }
    Ok(samples)
}

fn encode_binary(ds: &Dataset) -> Vec<u8> {
    let d = ds.d_in();
    let mut out = Vec::with_capacity(BIN_HEADER + ds.len() * (d + 3) * 8);
    out.extend_from_slice(BIN_MAGIC);
    out.extend_from_slice(&BIN_VERSION.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    for s in ds.samples() {
        out.extend_from_slice(&(s.id as f64).to_le_bytes());
        let label = if s.label.is_fp() { 1.0f64 } else { 0.0 };
        out.extend_from_slice(&label.to_le_bytes());
        let class = s.fp_class.map_or(-1.0f64, |c| c as f64);
        out.extend_from_slice(&class.to_le_bytes());
        for v in &s.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_binary(bytes: &[u8], manifest: &Manifest) -> Result<Vec<Sample>> {
    if bytes.len() < BIN_HEADER || &bytes[..8] != BIN_MAGIC {
        return Err(Error::Data("binary payload has a bad magic header".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    if u32_at(8) != BIN_VERSION {
        return Err(Error::Data(format!("unsupported binary payload version {}", u32_at(8))));
    }
    let n = u64_at(16) as usize;
    let d = u64_at(24) as usize;
    let width = d + 3;
    if bytes.len() != BIN_HEADER + n * width * 8 {
        return Err(Error::Data(format!(
            "binary payload is {} bytes, header implies {}",
            bytes.len(),
            BIN_HEADER + n * width * 8
        )));
    }
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let mut samples = Vec::with_capacity(n);
    for row in 0..n {
        let base = BIN_HEADER + row * width * 8;
        let bad = |what: String| Error::Data(format!("row {row}: {what}"));
        let id = f64_at(base);
        if !(id >= 0.0 && id.fract() == 0.0 && id <= 9.007_199_254_740_992e15) {
            return Err(bad(format!("id {id} is not a non-negative integer")));
        }
        let label = match f64_at(base + 8) {
            0.0 => Label::Tp,
            1.0 => Label::Fp,
            l => return Err(bad(format!("label {l} is not TP (0) or FP (1)"))),
        };
        let class = f64_at(base + 16);
        let fp_class = match label {
            Label::Tp if class == -1.0 => None,
            Label::Tp => return Err(bad("TP sample carries a class tag".into())),
            Label::Fp if class >= 0.0 && class.fract() == 0.0 && (class as usize) < manifest.class_names.len() => {
                Some(class as usize)
            }
            Label::Fp => return Err(bad(format!("FP class index {class} is missing or out of range"))),
        };
        let features: Vec<f64> = (0..d).map(|j| f64_at(base + 24 + 8 * j)).collect();
        if let Some(j) = features.iter().position(|v| !v.is_finite()) {
            return Err(bad(format!("feature f{j} is not finite")));
        }
        samples.push(Sample {
            id: id as u64,
            features,
            label,
            fp_class,
        });
    }
    Ok(samples)
}
