//! Labeled datasets, the synthetic Gaussian-mixture generator, the `FTDS`
//! binary format, class filtering and seeded mini-batching.
//!
//! `FTDS` layout (little-endian):
//!
//! ```text
//! b"FTDS"
//! u8        version (1)
//! u32       ndim
//! u32 x nd  dims, the first being the sample count N
//! u32       number of classes K
//! f32 x ..  features, row-major
//! u32 x N   labels
//! ```

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, TAG_MIXTURE, TAG_SHUFFLE};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: [u8; 4] = *b"FTDS";
pub const DATASET_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    class_names: Option<Vec<String>>,
    class_map: Option<Vec<usize>>,
}

/// A mini-batch. `indices` are positions in the source dataset and key the
/// per-sample random streams used by the attacks.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Same samples with replaced features (e.g. adversarial inputs).
    pub fn with_x(&self, x: Tensor) -> Self {
        Self {
            x,
            y: self.y.clone(),
            indices: self.indices.clone(),
        }
    }

    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            x: self.x.select_rows(rows)?,
            y: rows.iter().map(|&r| self.y[r]).collect(),
            indices: rows.iter().map(|&r| self.indices[r]).collect(),
        })
    }
}

impl Dataset {
    /// `features` is `[N, ...]` with values in `[0, 1]`; labels lie in `[0, K)`.
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidData("dataset has no samples".into()));
        }
        if features.shape().len() < 2 || features.rows() != labels.len() {
            return Err(Error::InvalidData(format!(
                "features {:?} do not match {} labels",
                features.shape(),
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::InvalidData("number of classes must be positive".into()));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        if let Some(v) = features.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidData(format!("feature value {v} outside [0, 1]")));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            class_names: None,
            class_map: None,
        })
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.num_classes {
            return Err(Error::InvalidData(format!(
                "{} class names for {} classes",
                names.len(),
                self.num_classes
            )));
        }
        self.class_names = Some(names);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Per-sample feature shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    /// For filtered datasets: `class_map()[new] == original class id`.
    pub fn class_map(&self) -> Option<&[usize]> {
        self.class_map.as_deref()
    }

    /// Original class id of a (possibly remapped) class.
    pub fn original_class(&self, c: usize) -> usize {
        self.class_map.as_ref().map_or(c, |m| m[c])
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Training needs at least two classes.
    pub fn is_trainable(&self) -> bool {
        self.num_classes >= 2
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Ok(Batch {
            x: self.features.select_rows(indices)?,
            y: indices.iter().map(|&i| self.labels[i]).collect(),
            indices: indices.to_vec(),
        })
    }

    pub fn full_batch(&self) -> Batch {
        Batch {
            x: self.features.clone(),
            y: self.labels.clone(),
            indices: (0..self.len()).collect(),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&DATASET_MAGIC)?;
        w.write_all(&[DATASET_VERSION])?;
        let shape = self.features.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&(self.num_classes as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.features.numel() * 4 + self.len() * 4);
        for v in self.features.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &self.labels {
            buf.extend_from_slice(&(l as u32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "magic")?;
        if magic != DATASET_MAGIC {
            return Err(Error::BadMagic {
                expected: DATASET_MAGIC,
                found: magic,
            });
        }
        let mut version = [0u8; 1];
        read_exact(r, &mut version, "version")?;
        if version[0] != DATASET_VERSION {
            return Err(Error::UnsupportedVersion(version[0]));
        }
        let ndim = read_u32(r, "ndim")? as usize;
        if !(2..=8).contains(&ndim) {
            return Err(Error::InvalidData(format!("unsupported rank {ndim}")));
        }
        let dims = (0..ndim)
            .map(|_| read_u32(r, "dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let num_classes = read_u32(r, "class count")? as usize;
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidData(format!("dims {dims:?} overflow")))?;
        let mut raw = Vec::new();
        r.take((numel * 4) as u64).read_to_end(&mut raw)?;
        if raw.len() != numel * 4 {
            return Err(Error::Truncated("while reading features".into()));
        }
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let n = dims[0];
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(read_u32(r, "labels")? as usize);
        }
        let features = Tensor::new(dims, data)?;
        Self::new(features, labels, num_classes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    ds.save(path)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::load(path)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(format!("while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Drops every sample whose class is in `exclude` and renumbers the
/// remaining classes to `0..K'` in ascending order of their old ids. The
/// output carries the mapping back to the original ids.
///
/// A single remaining class is allowed here; trainers reject it.
pub fn filter_classes(ds: &Dataset, exclude: &BTreeSet<usize>) -> Result<Dataset> {
    if exclude.is_empty() {
        return Ok(ds.clone());
    }
    if let Some(&c) = exclude.iter().find(|&&c| c >= ds.num_classes) {
        return Err(Error::LabelOutOfRange {
            label: c,
            classes: ds.num_classes,
        });
    }
    let kept: Vec<usize> = (0..ds.num_classes).filter(|c| !exclude.contains(c)).collect();
    if kept.is_empty() {
        return Err(Error::Config("cannot exclude every class".into()));
    }
    let mut remap = vec![usize::MAX; ds.num_classes];
    for (new, &old) in kept.iter().enumerate() {
        remap[old] = new;
    }
    let rows: Vec<usize> = (0..ds.len())
        .filter(|&i| remap[ds.labels[i]] != usize::MAX)
        .collect();
    if rows.is_empty() {
        return Err(Error::InvalidData(
            "no samples left after filtering classes".into(),
        ));
    }
    let labels = rows.iter().map(|&i| remap[ds.labels[i]]).collect();
    let mut out = Dataset::new(ds.features.select_rows(&rows)?, labels, kept.len())?;
    out.class_map = Some(kept.iter().map(|&c| ds.original_class(c)).collect());
    out.class_names = ds
        .class_names
        .as_ref()
        .map(|names| kept.iter().map(|&c| names[c].clone()).collect());
    Ok(out)
}

/// Shuffled mini-batches for one epoch. The permutation depends only on
/// `(seed, epoch)`; the final short batch is kept.
pub fn batches(ds: &Dataset, batch_size: usize, epoch: u64, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut stream(&[TAG_SHUFFLE, seed, epoch]));
    order.chunks(batch_size).map(|idx| ds.batch(idx)).collect()
}

/// One Gaussian component of a [`MixtureSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureClass {
    pub mean: Vec<f64>,
    pub sigma: f64,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

/// Isotropic Gaussian mixture. Samples are drawn in generation units and
/// mapped into `[0, 1]` by the affine map sending `range.0 -> 0` and
/// `range.1 -> 1` (then clamped). Without an explicit range, the range
/// spans all means padded by four times the largest sigma.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<(f64, f64)>,
    pub classes: Vec<MixtureClass>,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("mixture dimension must be positive".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("mixture needs at least one class".into()));
        }
        for (c, cls) in self.classes.iter().enumerate() {
            if cls.mean.len() != self.dim {
                return Err(Error::Config(format!(
                    "class {c} mean has {} coordinates, expected {}",
                    cls.mean.len(),
                    self.dim
                )));
            }
            if !(cls.sigma > 0.0 && cls.sigma.is_finite()) {
                return Err(Error::Config(format!("class {c} sigma must be positive")));
            }
            if cls.count == 0 {
                return Err(Error::Config(format!("class {c} count must be at least 1")));
            }
            if cls.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::Config(format!("class {c} mean is not finite")));
            }
        }
        let (lo, hi) = self.generation_range();
        if !(hi - lo > 0.0 && lo.is_finite() && hi.is_finite()) {
            return Err(Error::Config(format!("degenerate rescale range [{lo}, {hi}]")));
        }
        Ok(())
    }

    pub fn generation_range(&self) -> (f64, f64) {
        if let Some(r) = self.range {
            return r;
        }
        let pad = 4.0 * self.classes.iter().map(|c| c.sigma).fold(0.0, f64::max);
        let coords = self.classes.iter().flat_map(|c| c.mean.iter().copied());
        let (lo, hi) = coords.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
        (lo - pad, hi + pad)
    }

    /// Maps a generation-unit coordinate into `[0, 1]` units (unclamped).
    pub fn rescale(&self, v: f64) -> f64 {
        let (lo, hi) = self.generation_range();
        (v - lo) / (hi - lo)
    }

    /// Generation-unit length expressed in `[0, 1]` units.
    pub fn rescale_len(&self, len: f64) -> f64 {
        let (lo, hi) = self.generation_range();
        len / (hi - lo)
    }

    pub fn total_count(&self) -> usize {
        self.classes.iter().map(|c| c.count).sum()
    }

    /// Two well-separated blobs at `±2` on every axis.
    pub fn two_blobs(dim: usize, sigma: f64, count: usize) -> Self {
        Self {
            dim,
            range: None,
            classes: [-2.0, 2.0]
                .iter()
                .map(|&m| MixtureClass {
                    mean: vec![m; dim],
                    sigma,
                    count,
                    name: None,
                })
                .collect(),
        }
    }

    /// `k` classes with means `spread * e_c` in `dim >= k` dimensions.
    pub fn simplex(k: usize, dim: usize, spread: f64, sigma: f64, count: usize) -> Self {
        Self {
            dim,
            range: None,
            classes: (0..k)
                .map(|c| {
                    let mut mean = vec![0.0; dim];
                    mean[c % dim] = spread;
                    MixtureClass {
                        mean,
                        sigma,
                        count,
                        name: Some(format!("class{c}")),
                    }
                })
                .collect(),
        }
    }

    /// Desk-scale robust-fairness testbed: five classes in the plane,
    /// four outer classes around a central class that has a larger spread
    /// and a smaller margin to each neighbour (the "hard" class). Outer
    /// spreads also differ so that per-class difficulty is graded.
    pub fn fairness_stress(count: usize) -> Self {
        let cls = |name: &str, mean: [f64; 2], sigma: f64| MixtureClass {
            mean: mean.to_vec(),
            sigma,
            count,
            name: Some(name.into()),
        };
        Self {
            dim: 2,
            range: Some((-4.0, 4.0)),
            classes: vec![
                cls("hard", [0.0, 0.0], 0.55),
                cls("east", [2.0, 0.0], 0.25),
                cls("north", [0.0, 2.0], 0.3),
                cls("west", [-2.0, 0.0], 0.35),
                cls("south", [0.0, -2.0], 0.4),
            ],
        }
    }
}

/// Draws a dataset from `spec`; samples are grouped by class in spec order.
pub fn gen_mixture(spec: &MixtureSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let (lo, hi) = spec.generation_range();
    let width = hi - lo;
    let n = spec.total_count();
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (c, cls) in spec.classes.iter().enumerate() {
        let mut rng = stream(&[TAG_MIXTURE, seed, c as u64]);
        for _ in 0..cls.count {
            for &m in &cls.mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                let v = (m + cls.sigma * z - lo) / width;
                data.push(v.clamp(0.0, 1.0) as f32);
            }
            labels.push(c);
        }
    }
    let features = Tensor::new(vec![n, spec.dim], data)?;
    let ds = Dataset::new(features, labels, spec.classes.len())?;
    if spec.classes.iter().all(|c| c.name.is_some()) {
        let names = spec.classes.iter().map(|c| c.name.clone().unwrap()).collect();
        return ds.with_class_names(names);
    }
    Ok(ds)
}
