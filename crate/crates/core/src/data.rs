//! Synthetic Gaussian-mixture datasets and the on-disk dataset format.
//!
//! A dataset file is an ASCII header followed by a binary payload:
//!
//! ```text
//! cgcd-dataset 1
//! dim <D>
//! classes <C>
//! samples <N>
//! seed <u64 or ->
//! end
//! ```
//!
//! Every header line ends with `\n`. The payload holds `N` rows, each a
//! little-endian `u64` class id followed by `D` little-endian `f64` values.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::protocol::LabeledSet;

pub const DATASET_MAGIC: &str = "cgcd-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Distance of each class mean from the origin, in units of the
    /// within-class standard deviation.
    pub class_separation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 20,
            dim: 32,
            samples_per_class: 150,
            class_separation: 12.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.num_classes < 2 {
            return bad("num_classes", "must be at least 2");
        }
        if self.dim == 0 {
            return bad("dim", "must be positive");
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class", "must be positive");
        }
        if !(self.class_separation.is_finite() && self.class_separation >= 0.0) {
            return bad("class_separation", "must be a finite non-negative number");
        }
        Ok(())
    }
}

/// Class means uniform on the sphere of radius `class_separation`, unit-variance
/// isotropic noise around them. Rows are grouped by class.
pub fn class_means(spec: &SyntheticSpec) -> Tensor {
    let mut rng = Rng::new(spec.seed).fork(0);
    let mut means = Vec::with_capacity(spec.num_classes * spec.dim);
    for _ in 0..spec.num_classes {
        let dir: Vec<f64> = loop {
            let v: Vec<f64> = (0..spec.dim).map(|_| rng.normal()).collect();
            if v.iter().map(|x| x * x).sum::<f64>() > 1e-12 {
                break v;
            }
        };
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        means.extend(dir.iter().map(|x| x / norm * spec.class_separation));
    }
    Tensor::from_parts(vec![spec.num_classes, spec.dim], means)
}

pub fn gen_gaussian_mixture(spec: &SyntheticSpec) -> Result<LabeledSet> {
    spec.validate()?;
    let means = class_means(spec);
    let mut rng = Rng::new(spec.seed).fork(1);
    let n = spec.num_classes * spec.samples_per_class;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..spec.num_classes {
        for _ in 0..spec.samples_per_class {
            data.extend(means.row(c).iter().map(|m| m + rng.normal()));
            labels.push(c);
        }
    }
    LabeledSet::new(Tensor::from_parts(vec![n, spec.dim], data), labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub seed: Option<u64>,
    pub data: LabeledSet,
}

impl DatasetFile {
    pub fn dim(&self) -> usize {
        self.data.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.data.classes().len()
    }
}

pub fn save_dataset(path: &Path, file: &DatasetFile) -> Result<()> {
    let d = &file.data;
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let seed = file.seed.map_or("-".to_string(), |s| s.to_string());
    let mut out = format!(
        "{DATASET_MAGIC} {DATASET_VERSION}\ndim {}\nclasses {}\nsamples {}\nseed {seed}\nend\n",
        d.dim(),
        file.num_classes(),
        d.len()
    )
    .into_bytes();
    out.reserve(d.len() * (8 + 8 * d.dim()));
    for (i, &label) in d.labels().iter().enumerate() {
        out.extend_from_slice(&(label as u64).to_le_bytes());
        for v in d.features().row(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads the next `\n`-terminated header line starting at `*pos`.
fn header_line<'a>(bytes: &'a [u8], pos: &mut usize, path: &Path) -> Result<&'a str> {
    let malformed = |reason: &str| Error::MalformedHeader {
        path: path.into(),
        reason: reason.into(),
    };
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .take(256)
        .position(|&b| b == b'\n')
        .ok_or_else(|| malformed("unterminated header line"))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| malformed("header is not text"))
}

fn header_field<T: std::str::FromStr>(line: &str, key: &str, path: &Path) -> Result<T> {
    line.strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::MalformedHeader {
            path: path.into(),
            reason: format!("expected `{key} <value>`, found `{line}`"),
        })
}

pub fn load_dataset(path: &Path) -> Result<DatasetFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let first = header_line(&bytes, &mut pos, path)?;
    let version = first
        .strip_prefix(DATASET_MAGIC)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| Error::MalformedHeader {
            path: path.into(),
            reason: format!("missing `{DATASET_MAGIC}` magic"),
        })?;
    if version != DATASET_VERSION.to_string() {
        return Err(Error::VersionMismatch {
            path: path.into(),
            found: version.to_string(),
            expected: DATASET_VERSION,
        });
    }
    let dim: usize = header_field(header_line(&bytes, &mut pos, path)?, "dim", path)?;
    let classes: usize = header_field(header_line(&bytes, &mut pos, path)?, "classes", path)?;
    let samples: usize = header_field(header_line(&bytes, &mut pos, path)?, "samples", path)?;
    let seed_text: String = header_field(header_line(&bytes, &mut pos, path)?, "seed", path)?;
    let seed = match seed_text.as_str() {
        "-" => None,
        s => Some(s.parse().map_err(|_| Error::MalformedHeader {
            path: path.into(),
            reason: format!("bad seed `{s}`"),
        })?),
    };
    if header_line(&bytes, &mut pos, path)? != "end" {
        return Err(Error::MalformedHeader {
            path: path.into(),
            reason: "missing `end` line".into(),
        });
    }
    if samples == 0 {
        return Err(Error::EmptyDataset);
    }
    if dim == 0 {
        return Err(Error::MalformedHeader {
            path: path.into(),
            reason: "dim must be positive".into(),
        });
    }

    let row_bytes = 8 + 8 * dim;
    let expected = samples
        .checked_mul(row_bytes)
        .ok_or_else(|| Error::MalformedHeader {
            path: path.into(),
            reason: "sample count overflows".into(),
        })?;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::MalformedHeader {
            path: path.into(),
            reason: format!("{} trailing bytes after payload", payload.len() - expected),
        });
    }

    let mut labels = Vec::with_capacity(samples);
    let mut data = Vec::with_capacity(samples * dim);
    for row in payload.chunks_exact(row_bytes) {
        let label = u64::from_le_bytes(row[..8].try_into().unwrap());
        labels.push(usize::try_from(label).map_err(|_| Error::MalformedHeader {
            path: path.into(),
            reason: format!("class id {label} out of range"),
        })?);
        data.extend(
            row[8..]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap())),
        );
    }
    let distinct: BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() != classes {
        return Err(Error::MalformedHeader {
            path: path.into(),
            reason: format!("header says {classes} classes, payload has {}", distinct.len()),
        });
    }
    let features = Tensor::new(vec![samples, dim], data)?;
    Ok(DatasetFile {
        seed,
        data: LabeledSet::new(features, labels)?,
    })
}
