//! Labeled feature sets, the synthetic dataset generator, K-shot sampling,
//! and the on-disk feature format.
//!
//! A feature file is little-endian: `"OTFS"`, `u32` version (1), `u32` sample
//! count, `u32` dimension, then per sample a `u32` class id followed by `dim`
//! `f32` values. A JSON manifest next to it (`<file>.manifest.json`) carries
//! the class roster, dimension, generating seed and a hash of the generating
//! spec.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngState};

pub const MAGIC: &[u8; 4] = b"OTFS";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Novel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: u32,
    pub name: String,
    pub split: Split,
}

/// Feature vectors with class labels and the roster they refer to.
///
/// Values are stored as doubles but always hold `f32`-representable numbers,
/// so that writing and reading back is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatureSet {
    roster: Vec<ClassInfo>,
    labels: Vec<u32>,
    features: Matrix,
}

fn check_roster(roster: &[ClassInfo]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for c in roster {
        if !seen.insert(c.id) {
            // One id cannot be listed twice, in particular not as both base and novel.
            return Err(Error::Roster(format!("class id {} listed twice", c.id)));
        }
    }
    Ok(())
}

impl LabeledFeatureSet {
    /// Rounds every value to the nearest `f32`.
    pub fn new(roster: Vec<ClassInfo>, labels: Vec<u32>, mut features: Matrix) -> Result<Self> {
        check_roster(&roster)?;
        if labels.len() != features.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.rows()
            )));
        }
        let known: BTreeSet<u32> = roster.iter().map(|c| c.id).collect();
        if let Some(bad) = labels.iter().find(|l| !known.contains(l)) {
            return Err(Error::Roster(format!("sample label {bad} is not in the roster")));
        }
        for v in features.as_mut_slice() {
            *v = *v as f32 as f64;
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("feature values"));
        }
        Ok(Self {
            roster,
            labels,
            features,
        })
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn roster(&self) -> &[ClassInfo] {
        &self.roster
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn class_ids(&self, split: Split) -> Vec<u32> {
        self.roster
            .iter()
            .filter(|c| c.split == split)
            .map(|c| c.id)
            .collect()
    }

    pub fn split_of(&self, class_id: u32) -> Option<Split> {
        self.roster.iter().find(|c| c.id == class_id).map(|c| c.split)
    }

    /// Row indices of each class's samples, in sample order.
    pub fn indices_by_class(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut out: BTreeMap<u32, Vec<usize>> =
            self.roster.iter().map(|c| (c.id, Vec::new())).collect();
        for (i, l) in self.labels.iter().enumerate() {
            out.get_mut(l).expect("label in roster").push(i);
        }
        out
    }

    /// Samples at `indices`, in that order, with the same roster.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut features = Matrix::zeros(indices.len(), self.dim());
        let mut labels = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            features.row_mut(r).copy_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        Self {
            roster: self.roster.clone(),
            labels,
            features,
        }
    }

    /// Samples of classes in `split`, keeping only those classes in the roster.
    pub fn restrict_to(&self, split: Split) -> Self {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| self.split_of(self.labels[i]) == Some(split))
            .collect();
        let mut out = self.subset(&idx);
        out.roster.retain(|c| c.split == split);
        out
    }
}

/// Parameters of the synthetic feature distribution.
///
/// Class means lie on a sphere of radius `radius`; every class shares one
/// axis-aligned covariance whose per-axis standard deviation is
/// `noise_scale * exp(anisotropy * u_i)` with `u_i ~ N(0, 1)` drawn once per
/// dataset and rescaled to keep the average variance at `noise_scale^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub dim: usize,
    pub base_classes: usize,
    pub novel_classes: usize,
    pub radius: f64,
    pub noise_scale: f64,
    pub anisotropy: f64,
    /// Added to every class mean; moves the data away from the origin.
    pub offset: f64,
    pub train_per_base_class: usize,
    pub pool_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            dim: 32,
            base_classes: 15,
            novel_classes: 5,
            radius: 1.0,
            noise_scale: 0.35,
            anisotropy: 1.0,
            offset: 0.0,
            train_per_base_class: 200,
            pool_per_class: 20,
            test_per_class: 100,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("dim", self.dim),
            ("base_classes", self.base_classes),
            ("novel_classes", self.novel_classes),
            ("train_per_base_class", self.train_per_base_class),
            ("pool_per_class", self.pool_per_class),
            ("test_per_class", self.test_per_class),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
        }
        for (name, v) in [
            ("radius", self.radius),
            ("noise_scale", self.noise_scale),
            ("anisotropy", self.anisotropy),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        if !self.offset.is_finite() {
            return Err(Error::InvalidConfig("offset must be finite".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex(&Sha256::digest(&json))
    }

    pub fn roster(&self) -> Vec<ClassInfo> {
        let base = (0..self.base_classes).map(|i| ClassInfo {
            id: i as u32,
            name: format!("base_{i:02}"),
            split: Split::Base,
        });
        let novel = (0..self.novel_classes).map(|i| ClassInfo {
            id: (self.base_classes + i) as u32,
            name: format!("novel_{i:02}"),
            split: Split::Novel,
        });
        base.chain(novel).collect()
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// The three splits produced from one [`DatasetSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    /// Abundant samples of base classes only.
    pub base_train: LabeledFeatureSet,
    /// Held-out samples of every class to draw K-shot sets from.
    pub kshot_pool: LabeledFeatureSet,
    pub test: LabeledFeatureSet,
    /// Generating parameters, exposed for tests.
    pub class_means: Matrix,
    pub axis_std: Vec<f64>,
}

pub fn make_synthetic_dataset(spec: &DatasetSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let root = RngState::new(spec.seed);
    let d = spec.dim;
    let roster = spec.roster();
    let classes = roster.len();

    let mut geo = root.split(0);
    let mut means = Matrix::zeros(classes, d);
    for c in 0..classes {
        let row = means.row_mut(c);
        loop {
            geo.fill_normal(row);
            let n = crate::numerics::norm(row);
            if n > 1e-12 {
                row.iter_mut().for_each(|v| *v = *v * spec.radius / n + spec.offset);
                break;
            }
        }
    }
    let mut axis_std: Vec<f64> = (0..d).map(|_| (spec.anisotropy * geo.normal()).exp()).collect();
    let mean_var = axis_std.iter().map(|s| s * s).sum::<f64>() / d as f64;
    let norm_factor = spec.noise_scale / mean_var.sqrt();
    axis_std.iter_mut().for_each(|s| *s *= norm_factor);

    let draw = |stream: u64, per_class: usize, ids: &[usize]| -> Result<LabeledFeatureSet> {
        let mut features = Matrix::zeros(per_class * ids.len(), d);
        let mut labels = Vec::with_capacity(per_class * ids.len());
        let mut row = 0;
        let split_rng = root.split(stream);
        for &c in ids {
            let mut rng = split_rng.split(c as u64);
            for _ in 0..per_class {
                let out = features.row_mut(row);
                rng.fill_normal(out);
                for ((v, m), s) in out.iter_mut().zip(means.row(c)).zip(&axis_std) {
                    *v = m + s * *v;
                }
                labels.push(roster[c].id);
                row += 1;
            }
        }
        LabeledFeatureSet::new(roster.clone(), labels, features)
    };
    let base_ids: Vec<usize> = (0..spec.base_classes).collect();
    let all_ids: Vec<usize> = (0..classes).collect();
    Ok(SyntheticDataset {
        base_train: draw(1, spec.train_per_base_class, &base_ids)?,
        kshot_pool: draw(2, spec.pool_per_class, &all_ids)?,
        test: draw(3, spec.test_per_class, &all_ids)?,
        class_means: means,
        axis_std,
    })
}

/// Exactly `shots` samples of every roster class, drawn without replacement.
/// The result is grouped by roster order and keeps pool order within a class.
pub fn kshot_sample(
    pool: &LabeledFeatureSet,
    shots: usize,
    rng: &mut RngState,
) -> Result<LabeledFeatureSet> {
    if shots == 0 {
        return Err(Error::InvalidConfig("shots must be at least 1".into()));
    }
    let by_class = pool.indices_by_class();
    let mut chosen = Vec::with_capacity(shots * pool.roster().len());
    for class in pool.roster() {
        let mut idx = by_class[&class.id].clone();
        if idx.len() < shots {
            return Err(Error::NotEnoughSamples {
                class: class.id,
                available: idx.len(),
                requested: shots,
            });
        }
        // Partial Fisher-Yates.
        for i in 0..shots {
            let j = i + rng.below(idx.len() - i);
            idx.swap(i, j);
        }
        let mut pick = idx[..shots].to_vec();
        pick.sort_unstable();
        chosen.extend(pick);
    }
    Ok(pool.subset(&chosen))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub dim: usize,
    pub samples: usize,
    pub roster: Vec<ClassInfo>,
    pub seed: Option<u64>,
    pub spec_hash: Option<String>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Writes `bytes` to a temporary file in the target directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn encode_features(set: &LabeledFeatureSet) -> Result<Vec<u8>> {
    let too_big = |what: &str| Error::InvalidConfig(format!("{what} does not fit in u32"));
    let n = u32::try_from(set.len()).map_err(|_| too_big("sample count"))?;
    let d = u32::try_from(set.dim()).map_err(|_| too_big("dimension"))?;
    let mut out = Vec::with_capacity(HEADER_LEN + set.len() * (4 + 4 * set.dim()));
    out.extend_from_slice(MAGIC);
    for v in [FORMAT_VERSION, n, d] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (label, row) in set.labels.iter().zip(set.features.iter_rows()) {
        out.extend_from_slice(&label.to_le_bytes());
        for &v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parsed binary payload: labels and features, before roster checks.
pub fn decode_features(bytes: &[u8]) -> Result<(Vec<u32>, Matrix)> {
    let fail = |offset: usize, message: String| Error::Format {
        offset: offset as u64,
        message,
    };
    let u32_at = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| fail(bytes.len(), format!("truncated: needed 4 bytes at {off}")))
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(fail(0, "missing OTFS magic".into()));
    }
    let version = u32_at(4)?;
    if version != FORMAT_VERSION {
        return Err(fail(4, format!("unsupported version {version}")));
    }
    let n = u32_at(8)? as usize;
    let d = u32_at(12)? as usize;
    let record = 4 + 4 * d;
    let expected = n
        .checked_mul(record)
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| fail(8, "sample count overflows".into()))?;
    if bytes.len() < expected {
        let complete = (bytes.len() - HEADER_LEN) / record;
        return Err(fail(
            bytes.len(),
            format!("truncated: {n} records declared, {complete} complete"),
        ));
    }
    if bytes.len() > expected {
        return Err(fail(expected, format!("{} trailing bytes", bytes.len() - expected)));
    }
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let off = HEADER_LEN + i * record;
        labels.push(u32_at(off)?);
        for j in 0..d {
            let at = off + 4 + 4 * j;
            let v = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(fail(at, "non-finite feature value".into()));
            }
            data.push(v as f64);
        }
    }
    Ok((labels, Matrix::from_vec(n, d, data)?))
}

/// Writes the binary file and its manifest, each atomically.
pub fn write_features(
    path: &Path,
    set: &LabeledFeatureSet,
    seed: Option<u64>,
    spec_hash: Option<String>,
) -> Result<()> {
    let manifest = Manifest {
        format: "OTFS".into(),
        dim: set.dim(),
        samples: set.len(),
        roster: set.roster.clone(),
        seed,
        spec_hash,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    write_atomic(path, &encode_features(set)?)?;
    write_atomic(&manifest_path(path), json.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    check_roster(&m.roster)?;
    Ok(m)
}

pub fn read_features(path: &Path) -> Result<(LabeledFeatureSet, Manifest)> {
    let manifest = read_manifest(path)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (labels, features) = decode_features(&bytes)?;
    if features.cols() != manifest.dim {
        return Err(Error::DimensionMismatch {
            expected: manifest.dim,
            found: features.cols(),
        });
    }
    if labels.len() != manifest.samples {
        return Err(Error::Format {
            offset: 8,
            message: format!(
                "file holds {} samples, manifest declares {}",
                labels.len(),
                manifest.samples
            ),
        });
    }
    let set = LabeledFeatureSet::new(manifest.roster.clone(), labels, features)?;
    Ok((set, manifest))
}
