//! Long-tailed feature datasets: synthetic generation, the `DLFT` binary
//! container, and per-class statistics.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{seal, unseal, ByteReader, ByteWriter};
use crate::error::{DlsaError, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub const DATASET_MAGIC: &[u8; 4] = b"DLFT";
pub const DATASET_VERSION: u32 = 1;
const DATASET_HEADER_LEN: usize = 24;

/// Classes with more training samples than this are "head" classes.
pub const HEAD_THRESHOLD: usize = 50;

/// Labelled feature vectors. Labels are 0-based in memory and 1-based on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    dim: usize,
    num_classes: usize,
    features: Vec<f32>,
    labels: Vec<usize>,
}

impl FeatureDataset {
    pub fn new(dim: usize, num_classes: usize, features: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        if features.len() != labels.len() * dim {
            return Err(DlsaError::dim(
                "FeatureDataset::new",
                format!("{} values for {} samples of dimension {dim}", features.len(), labels.len()),
            ));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(DlsaError::contract(format!("label {y} outside 0..{num_classes}")));
        }
        Ok(FeatureDataset {
            dim,
            num_classes,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Per-class sample counts, including zeros for absent classes.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Features widened to the working scalar type.
    pub fn features_matrix<T: Scalar>(&self) -> Matrix<T> {
        let data = self.features.iter().map(|&v| T::of(v as f64)).collect();
        Matrix::from_vec(self.len(), self.dim, data).expect("shape checked at construction")
    }

    /// Samples at `idx`, in that order, keeping the class space.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut features = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            features.extend_from_slice(self.row(i));
        }
        FeatureDataset {
            dim: self.dim,
            num_classes: self.num_classes,
            features,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn class_stats(&self, head_threshold: usize) -> Result<ClassStats> {
        if self.is_empty() {
            return Err(DlsaError::contract("class statistics of an empty dataset"));
        }
        Ok(ClassStats::from_counts(self.counts(), head_threshold))
    }

    /// CRC-32 of the encoded file, used to recognise a dataset later.
    pub fn fingerprint(&self) -> u32 {
        crc32fast::hash(&encode_dataset(self))
    }
}

/// Many/Medium/Few-shot bands by training count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShotGroup {
    Many,
    Medium,
    Few,
}

impl ShotGroup {
    pub fn of(count: usize) -> Self {
        if count > 100 {
            ShotGroup::Many
        } else if count >= 20 {
            ShotGroup::Medium
        } else {
            ShotGroup::Few
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub counts: Vec<usize>,
    /// Largest over smallest count among classes that occur.
    pub beta: f64,
    pub head_threshold: usize,
    pub head: Vec<bool>,
    pub groups: Vec<ShotGroup>,
}

impl ClassStats {
    pub fn from_counts(counts: Vec<usize>, head_threshold: usize) -> Self {
        let present = counts.iter().copied().filter(|&n| n > 0);
        let max = present.clone().max().unwrap_or(0);
        let min = present.min().unwrap_or(0);
        let beta = if min == 0 { f64::NAN } else { max as f64 / min as f64 };
        ClassStats {
            head: counts.iter().map(|&n| n > head_threshold).collect(),
            groups: counts.iter().map(|&n| ShotGroup::of(n)).collect(),
            beta,
            head_threshold,
            counts,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    /// Per-sample head flags for a label sequence.
    pub fn head_flags(&self, labels: &[usize]) -> Vec<bool> {
        labels.iter().map(|&y| self.head[y]).collect()
    }

    /// Fraction of training samples belonging to tail classes.
    pub fn tail_fraction(&self) -> f64 {
        let total: usize = self.counts.iter().sum();
        let tail: usize = self.counts.iter().zip(&self.head).filter(|(_, &h)| !h).map(|(n, _)| n).sum();
        tail as f64 / total as f64
    }
}

/// How class clouds are shaped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum ClassGeometry {
    /// Every class uses `spread`.
    #[default]
    Isotropic,
    /// Head classes (count above `head_threshold`) are diffuse clouds with
    /// noise `head_spread`. Tail classes are compact (`tail_spread`) and
    /// nested inside head clouds: tail class `j` sits at the centre of head
    /// class `j mod heads` displaced by `N(0, tail_offset²·I)`.
    HeadTail {
        head_threshold: usize,
        head_spread: f64,
        tail_spread: f64,
        tail_offset: f64,
    },
}

impl ClassGeometry {
    fn spread_of(&self, count: usize, default: f64) -> f64 {
        match *self {
            ClassGeometry::Isotropic => default,
            ClassGeometry::HeadTail {
                head_threshold,
                head_spread,
                tail_spread,
                ..
            } => {
                if count > head_threshold {
                    head_spread
                } else {
                    tail_spread
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub beta: f64,
    pub dim: usize,
    pub n_max: usize,
    pub center_scale: f64,
    pub spread: f64,
    pub test_per_class: usize,
    pub seed: u64,
    #[serde(default)]
    pub geometry: ClassGeometry,
}

impl SyntheticSpec {
    /// The standard desk-scale benchmark: 50 classes, β = 100, D = 32,
    /// isotropic clouds.
    pub fn standard(seed: u64) -> Self {
        SyntheticSpec {
            classes: 50,
            beta: 100.0,
            dim: 32,
            n_max: 500,
            center_scale: 0.5,
            spread: 0.5,
            test_per_class: 20,
            seed,
            geometry: ClassGeometry::Isotropic,
        }
    }

    /// The standard benchmark with diffuse head clouds and compact Few-shot
    /// classes nested inside them.
    pub fn head_tail(seed: u64) -> Self {
        SyntheticSpec {
            geometry: ClassGeometry::HeadTail {
                head_threshold: 19,
                head_spread: 1.0,
                tail_spread: 0.2,
                tail_offset: 0.15,
            },
            ..Self::standard(seed)
        }
    }
}

/// Power-law class sizes `round(n_max · i^{−γ})` with `γ = ln β / ln C`.
pub fn class_counts(classes: usize, beta: f64, n_max: usize) -> Result<Vec<usize>> {
    if classes < 2 {
        return Err(DlsaError::contract(format!("need at least 2 classes, got {classes}")));
    }
    if !(beta >= 1.0 && beta.is_finite()) {
        return Err(DlsaError::contract(format!("imbalance factor must be ≥ 1, got {beta}")));
    }
    if (n_max as f64) < beta {
        return Err(DlsaError::contract(format!(
            "n_max = {n_max} is below β = {beta}; the smallest class would be empty"
        )));
    }
    let gamma = beta.ln() / (classes as f64).ln();
    let counts: Vec<usize> = (1..=classes)
        .map(|i| (n_max as f64 * (i as f64).powf(-gamma)).round() as usize)
        .collect();
    if counts.contains(&0) {
        return Err(DlsaError::contract("a class would have no samples"));
    }
    Ok(counts)
}

/// Generates a long-tailed training set and a balanced test set.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(FeatureDataset, FeatureDataset)> {
    let counts = class_counts(spec.classes, spec.beta, spec.n_max)?;
    if spec.dim == 0 {
        return Err(DlsaError::contract("feature dimension must be positive"));
    }
    let mut reals = vec![("center_scale", spec.center_scale), ("spread", spec.spread)];
    if let ClassGeometry::HeadTail {
        head_spread,
        tail_spread,
        tail_offset,
        ..
    } = spec.geometry
    {
        reals.extend([("head_spread", head_spread), ("tail_spread", tail_spread), ("tail_offset", tail_offset)]);
    }
    for (name, v) in reals {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(DlsaError::contract(format!("{name} must be a non-negative real, got {v}")));
        }
    }
    let mut rng = crate::seeded_rng(spec.seed);
    let d = spec.dim;
    let mut gauss = |scale: f64| -> f64 { scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) };

    let mut centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..d).map(|_| gauss(spec.center_scale)).collect())
        .collect();
    if let ClassGeometry::HeadTail {
        head_threshold,
        tail_offset,
        ..
    } = spec.geometry
    {
        let heads = counts.iter().filter(|&&n| n > head_threshold).count();
        if heads > 0 {
            for j in heads..spec.classes {
                let host = (j - heads) % heads;
                centers[j] = (0..d).map(|i| centers[host][i] + gauss(tail_offset)).collect();
            }
        }
    }
    let spreads: Vec<f64> = counts.iter().map(|&n| spec.geometry.spread_of(n, spec.spread)).collect();

    let mut draw = |per_class: &dyn Fn(usize) -> usize| -> (Vec<f32>, Vec<usize>) {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per_class(c) {
                features.extend(center.iter().map(|&m| (m + gauss(spreads[c])) as f32));
                labels.push(c);
            }
        }
        (features, labels)
    };
    let (train_x, train_y) = draw(&|c| counts[c]);
    let (test_x, test_y) = draw(&|_| spec.test_per_class);
    Ok((
        FeatureDataset::new(d, spec.classes, train_x, train_y)?,
        FeatureDataset::new(d, spec.classes, test_x, test_y)?,
    ))
}

/// Encodes a dataset in the `DLFT` container.
pub fn encode_dataset(ds: &FeatureDataset) -> Vec<u8> {
    let mut header = ByteWriter::new();
    header.bytes(DATASET_MAGIC);
    header.u32(DATASET_VERSION);
    header.u64(ds.len() as u64);
    header.len_u32(ds.dim);
    header.len_u32(ds.num_classes);
    let mut payload = ByteWriter::new();
    for &v in &ds.features {
        payload.f32(v);
    }
    for &y in &ds.labels {
        payload.len_u32(y + 1);
    }
    seal(header.into_inner(), payload.into_inner())
}

/// Decodes and validates a `DLFT` container.
pub fn decode_dataset(bytes: &[u8]) -> Result<FeatureDataset> {
    let mut head = ByteReader::new(bytes, 0);
    if head.take(4)? != DATASET_MAGIC {
        return Err(DlsaError::format(0, "bad magic, expected \"DLFT\""));
    }
    let version = head.u32()?;
    if version != DATASET_VERSION {
        return Err(DlsaError::format(4, format!("unsupported version {version}")));
    }
    let n = head.u64()?;
    let d = head.usize32()?;
    let c = head.usize32()?;
    let payload = unseal(bytes, DATASET_HEADER_LEN)?;
    let expected = n
        .checked_mul(d as u64 + 1)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| DlsaError::format(8, "sample count overflows"))?;
    if payload.len() as u64 != expected {
        return Err(DlsaError::format(
            DATASET_HEADER_LEN as u64,
            format!("payload holds {} bytes, header implies {expected}", payload.len()),
        ));
    }
    let n = n as usize;
    let mut r = ByteReader::new(payload, DATASET_HEADER_LEN as u64);
    let mut features = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        features.push(r.f32()?);
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.offset();
        let y = r.usize32()?;
        if y == 0 || y > c {
            return Err(DlsaError::format(at, format!("label {y} outside 1..={c}")));
        }
        labels.push(y - 1);
    }
    r.expect_end()?;
    FeatureDataset::new(d, c, features, labels)
}

pub fn save_dataset(path: &Path, ds: &FeatureDataset) -> Result<()> {
    std::fs::write(path, encode_dataset(ds))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<FeatureDataset> {
    decode_dataset(&std::fs::read(path)?)
}

/// JSON sidecar describing a generated train/test pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub classes: usize,
    pub dim: usize,
    pub beta: f64,
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub train_file: String,
    pub test_file: String,
}
