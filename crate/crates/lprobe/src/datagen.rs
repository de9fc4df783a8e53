//! Synthetic multi-domain classification suites and CSV ingestion.
//!
//! A suite has one anchor domain with train/val/test splits and M shifted
//! domains that are evaluation-only. Every shifted domain draws from the
//! anchor's class-prototype distribution, then rotates features by its
//! shift angle (Givens rotations over a suite-wide set of coordinate
//! pairs) and adds a bias. Labels are assigned round-robin so class
//! marginals stay balanced within one sample.
//!
//! Everything is keyed by explicit seeds; regeneration is bit-identical.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

/// Radius of the sphere the class prototypes are drawn on.
pub const PROTOTYPE_RADIUS: f64 = 3.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid suite arguments: {0}")]
    BadArgs(String),
    #[error("duplicate domain name {0:?}")]
    DuplicateDomain(String),
    #[error("domain {name:?}: shift angle must be >= 0, got {theta}")]
    NegativeAngle { name: String, theta: f64 },
    #[error("csv row {row}: {msg}")]
    Csv { row: usize, msg: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Derive an independent stream seed from a base seed and a text tag.
///
/// FNV-1a over the tag bytes, mixed with the base seed. Stable across
/// platforms and releases, unlike the standard library hasher.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    const PRIME: u64 = 0x100000001b3;
    let mut h = 0xcbf29ce484222325u64;
    for b in base.to_le_bytes() {
        h = (h ^ b as u64).wrapping_mul(PRIME);
    }
    for &b in tag.as_bytes() {
        h = (h ^ b as u64).wrapping_mul(PRIME);
    }
    h
}

/// Identity and shift parameters of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    /// Rotation angle in radians; 0 for the anchor.
    pub shift_angle: f64,
    /// Additive feature bias; empty means zero.
    #[serde(default)]
    pub shift_bias: Vec<f64>,
    /// Standard deviation of the Gaussian around each prototype.
    pub noise_sigma: f64,
}

impl DomainSpec {
    /// Anchor-style spec: zero angle, zero bias.
    pub fn anchor(name: &str, noise_sigma: f64) -> Self {
        Self {
            name: name.to_string(),
            shift_angle: 0.0,
            shift_bias: vec![],
            noise_sigma,
        }
    }
}

/// Samples per anchor split. Shifted domains get `test`-sized eval sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// A labeled feature set: `[n, d]` features plus one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        if features.shape().len() != 2 {
            return Err(DataError::BadArgs(format!(
                "features must be rank 2, got shape {:?}",
                features.shape()
            )));
        }
        if features.shape()[0] != labels.len() {
            return Err(DataError::BadArgs(format!(
                "{} feature rows but {} labels",
                features.shape()[0],
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(DataError::BadArgs(format!(
                "num_classes must be at least 2, got {num_classes}"
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::BadArgs(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.shape()[1]
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

    /// Extract rows by index: `([n, d]` features, `[n]` labels-as-floats).
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let d = self.input_dim();
        let mut feats = Vec::with_capacity(indices.len() * d);
        let mut labs = Vec::with_capacity(indices.len());
        for &i in indices {
            feats.extend_from_slice(self.features.row(i));
            labs.push(self.labels[i] as f64);
        }
        (
            Tensor::from_parts_unchecked(vec![indices.len(), d], feats),
            Tensor::from_parts_unchecked(vec![indices.len()], labs),
        )
    }

    /// The whole set as one batch.
    pub fn full_batch(&self) -> (Tensor, Tensor) {
        let indices: Vec<usize> = (0..self.len()).collect();
        self.batch(&indices)
    }

    /// Serialize as CSV: `d` feature columns at 17 significant digits plus
    /// one integer label column.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.len() {
            for v in self.features.row(i) {
                out.push_str(&format!("{v:.16e},"));
            }
            out.push_str(&format!("{}\n", self.labels[i]));
        }
        out
    }
}

/// Parse a CSV of `d` float columns plus one integer label column.
///
/// `num_classes` of the result is `max label + 1` (at least 2).
pub fn load_csv(path: &Path, has_header: bool) -> Result<Dataset, DataError> {
    let text = fs::read_to_string(path)?;
    parse_csv(&text, has_header)
}

/// [`load_csv`] over an in-memory string.
pub fn parse_csv(text: &str, has_header: bool) -> Result<Dataset, DataError> {
    let mut width = None;
    let mut feats: Vec<f64> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut rows = 0usize;
    for (idx, line) in text.lines().enumerate() {
        let row = idx + 1;
        if idx == 0 && has_header {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() < 2 {
            return Err(DataError::Csv {
                row,
                msg: format!("expected at least 2 columns, got {}", cells.len()),
            });
        }
        match width {
            None => width = Some(cells.len()),
            Some(w) if w != cells.len() => {
                return Err(DataError::Csv {
                    row,
                    msg: format!("ragged row: expected {w} columns, got {}", cells.len()),
                })
            }
            _ => {}
        }
        let (feat_cells, label_cell) = cells.split_at(cells.len() - 1);
        for cell in feat_cells {
            let v: f64 = cell.trim().parse().map_err(|_| DataError::Csv {
                row,
                msg: format!("non-numeric feature cell {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(DataError::Csv {
                    row,
                    msg: format!("non-finite feature {v}"),
                });
            }
            feats.push(v);
        }
        let label: i64 = label_cell[0].trim().parse().map_err(|_| DataError::Csv {
            row,
            msg: format!("non-integer label cell {:?}", label_cell[0]),
        })?;
        if label < 0 {
            return Err(DataError::Csv {
                row,
                msg: format!("negative label {label}"),
            });
        }
        labels.push(label as usize);
        rows += 1;
    }
    if rows == 0 {
        return Err(DataError::Csv {
            row: 0,
            msg: "no data rows".into(),
        });
    }
    let d = width.unwrap() - 1;
    let num_classes = labels.iter().copied().max().unwrap() + 1;
    Dataset::new(
        Tensor::from_parts_unchecked(vec![rows, d], feats),
        labels,
        num_classes.max(2),
    )
}

/// Anchor train/val/test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// One shifted domain: its spec and its evaluation-only dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedDomain {
    pub spec: DomainSpec,
    pub eval: Dataset,
}

/// Everything needed to reconstruct a suite from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteManifest {
    pub num_classes: usize,
    pub input_dim: usize,
    pub prototypes_seed: u64,
    pub gen_seed: u64,
    pub counts: SplitCounts,
    /// Domain specs; the first entry is the anchor.
    pub domains: Vec<DomainSpec>,
}

/// One anchor domain plus M shifted evaluation domains.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSuite {
    pub num_classes: usize,
    pub input_dim: usize,
    pub prototypes: Vec<Vec<f64>>,
    pub anchor_spec: DomainSpec,
    pub anchor: AnchorSplits,
    pub shifted: Vec<ShiftedDomain>,
    pub prototypes_seed: u64,
    pub gen_seed: u64,
    pub counts: SplitCounts,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Draw one sample set from the prototype distribution: label `i % K`,
/// features `prototype[label] + N(0, sigma^2 I)`.
fn draw_prototype_samples(
    rng: &mut ChaCha8Rng,
    prototypes: &[Vec<f64>],
    sigma: f64,
    count: usize,
    num_classes: usize,
) -> Dataset {
    let d = prototypes[0].len();
    let mut feats = Vec::with_capacity(count * d);
    let mut labels = Vec::with_capacity(count);
    let normal = StandardNormal;
    for i in 0..count {
        let label = i % num_classes;
        labels.push(label);
        for &p in &prototypes[label] {
            let z: f64 = normal.sample(rng);
            feats.push(p + sigma * z);
        }
    }
    Dataset {
        features: Tensor::from_parts_unchecked(vec![count, d], feats),
        labels,
        num_classes,
    }
}

/// The suite-wide rotation plane pairing: disjoint coordinate pairs from a
/// seeded shuffle of `0..d`. Shared by all domains so that larger angles
/// rotate further along the same planes.
fn rotation_pairs(d: usize, gen_seed: u64) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..d).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(gen_seed, "rotation-pairs"));
    // Fisher-Yates; explicit so the stream layout is pinned.
    for i in (1..d).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order.chunks_exact(2).map(|c| (c[0], c[1])).collect()
}

/// Dense `d x d` rotation by `theta` over the given disjoint planes.
fn rotation_matrix(d: usize, pairs: &[(usize, usize)], theta: f64) -> Vec<f64> {
    let mut r = vec![0.0; d * d];
    for i in 0..d {
        r[i * d + i] = 1.0;
    }
    let (sin, cos) = theta.sin_cos();
    for &(a, b) in pairs {
        r[a * d + a] = cos;
        r[a * d + b] = -sin;
        r[b * d + a] = sin;
        r[b * d + b] = cos;
    }
    r
}

fn apply_affine(dataset: &Dataset, r: &[f64], bias: &[f64]) -> Dataset {
    let d = dataset.input_dim();
    let n = dataset.len();
    let mut feats = vec![0.0; n * d];
    for i in 0..n {
        let x = dataset.features.row(i);
        let out = &mut feats[i * d..(i + 1) * d];
        for (row_idx, o) in out.iter_mut().enumerate() {
            let row = &r[row_idx * d..(row_idx + 1) * d];
            *o = row.iter().zip(x).map(|(rv, xv)| rv * xv).sum::<f64>() + bias[row_idx];
        }
    }
    Dataset {
        features: Tensor::from_parts_unchecked(vec![n, d], feats),
        labels: dataset.labels.clone(),
        num_classes: dataset.num_classes,
    }
}

/// Generate a full suite. `domain_specs[0]` must be the anchor (angle 0,
/// zero bias); every later spec defines one shifted evaluation domain.
pub fn make_domain_suite(
    num_classes: usize,
    input_dim: usize,
    prototypes_seed: u64,
    counts: SplitCounts,
    domain_specs: &[DomainSpec],
    gen_seed: u64,
) -> Result<DomainSuite, DataError> {
    if num_classes < 2 {
        return Err(DataError::BadArgs(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    if input_dim < 2 {
        return Err(DataError::BadArgs(format!(
            "need input_dim of at least 2, got {input_dim}"
        )));
    }
    if counts.train == 0 || counts.val == 0 || counts.test == 0 {
        return Err(DataError::BadArgs(format!(
            "all split counts must be positive, got {counts:?}"
        )));
    }
    if domain_specs.len() < 2 {
        return Err(DataError::BadArgs(
            "need an anchor spec plus at least one shifted domain".into(),
        ));
    }
    let anchor_spec = &domain_specs[0];
    if anchor_spec.shift_angle != 0.0 || anchor_spec.shift_bias.iter().any(|&b| b != 0.0) {
        return Err(DataError::BadArgs(format!(
            "anchor domain {:?} must have zero shift angle and zero bias",
            anchor_spec.name
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    for spec in domain_specs {
        if !valid_name(&spec.name) {
            return Err(DataError::BadArgs(format!(
                "domain name {:?} must be non-empty and use only [A-Za-z0-9_-]",
                spec.name
            )));
        }
        if !seen.insert(spec.name.as_str()) {
            return Err(DataError::DuplicateDomain(spec.name.clone()));
        }
        if spec.shift_angle < 0.0 {
            return Err(DataError::NegativeAngle {
                name: spec.name.clone(),
                theta: spec.shift_angle,
            });
        }
        if !(spec.noise_sigma > 0.0) {
            return Err(DataError::BadArgs(format!(
                "domain {:?}: noise_sigma must be positive, got {}",
                spec.name, spec.noise_sigma
            )));
        }
        if !spec.shift_bias.is_empty() && spec.shift_bias.len() != input_dim {
            return Err(DataError::BadArgs(format!(
                "domain {:?}: bias has {} entries, expected {input_dim}",
                spec.name,
                spec.shift_bias.len()
            )));
        }
    }

    // Prototypes: seeded standard-normal directions scaled onto the sphere.
    let mut prng = ChaCha8Rng::seed_from_u64(prototypes_seed);
    let normal = StandardNormal;
    let mut prototypes = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mut v: Vec<f64> = (0..input_dim).map(|_| normal.sample(&mut prng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // A zero draw has probability zero; guard keeps the scale finite.
        let scale = if norm == 0.0 { 0.0 } else { PROTOTYPE_RADIUS / norm };
        v.iter_mut().for_each(|x| *x *= scale);
        prototypes.push(v);
    }

    let mut anchor_rng = ChaCha8Rng::seed_from_u64(derive_seed(gen_seed, &anchor_spec.name));
    let sigma = anchor_spec.noise_sigma;
    let anchor = AnchorSplits {
        train: draw_prototype_samples(&mut anchor_rng, &prototypes, sigma, counts.train, num_classes),
        val: draw_prototype_samples(&mut anchor_rng, &prototypes, sigma, counts.val, num_classes),
        test: draw_prototype_samples(&mut anchor_rng, &prototypes, sigma, counts.test, num_classes),
    };

    let pairs = rotation_pairs(input_dim, gen_seed);
    let zero_bias = vec![0.0; input_dim];
    let mut shifted = Vec::with_capacity(domain_specs.len() - 1);
    for spec in &domain_specs[1..] {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(gen_seed, &spec.name));
        let base = draw_prototype_samples(
            &mut rng,
            &prototypes,
            spec.noise_sigma,
            counts.test,
            num_classes,
        );
        let r = rotation_matrix(input_dim, &pairs, spec.shift_angle);
        let bias = if spec.shift_bias.is_empty() {
            &zero_bias
        } else {
            &spec.shift_bias
        };
        let eval = apply_affine(&base, &r, bias);
        shifted.push(ShiftedDomain {
            spec: spec.clone(),
            eval,
        });
    }

    Ok(DomainSuite {
        num_classes,
        input_dim,
        prototypes,
        anchor_spec: anchor_spec.clone(),
        anchor,
        shifted,
        prototypes_seed,
        gen_seed,
        counts,
    })
}

/// Regenerate a suite from its manifest.
pub fn suite_from_manifest(manifest: &SuiteManifest) -> Result<DomainSuite, DataError> {
    make_domain_suite(
        manifest.num_classes,
        manifest.input_dim,
        manifest.prototypes_seed,
        manifest.counts,
        &manifest.domains,
        manifest.gen_seed,
    )
}

impl DomainSuite {
    pub fn manifest(&self) -> SuiteManifest {
        let mut domains = Vec::with_capacity(1 + self.shifted.len());
        domains.push(self.anchor_spec.clone());
        domains.extend(self.shifted.iter().map(|s| s.spec.clone()));
        SuiteManifest {
            num_classes: self.num_classes,
            input_dim: self.input_dim,
            prototypes_seed: self.prototypes_seed,
            gen_seed: self.gen_seed,
            counts: self.counts,
            domains,
        }
    }

    /// Write `manifest.json` plus one CSV per split / shifted domain.
    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir)?;
        let manifest = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(dir.join("manifest.json"), manifest + "\n")?;
        fs::write(dir.join("anchor_train.csv"), self.anchor.train.to_csv())?;
        fs::write(dir.join("anchor_val.csv"), self.anchor.val.to_csv())?;
        fs::write(dir.join("anchor_test.csv"), self.anchor.test.to_csv())?;
        for s in &self.shifted {
            fs::write(
                dir.join(format!("domain_{}.csv", s.spec.name)),
                s.eval.to_csv(),
            )?;
        }
        Ok(())
    }

    /// Load a suite saved by [`Self::save`], reading the stored CSVs.
    pub fn load(dir: &Path) -> Result<DomainSuite, DataError> {
        let manifest: SuiteManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.domains.len() < 2 {
            return Err(DataError::Manifest(
                "manifest must list the anchor plus at least one shifted domain".into(),
            ));
        }
        let k = manifest.num_classes;
        let d = manifest.input_dim;
        let load_split = |file: &str| -> Result<Dataset, DataError> {
            let ds = load_csv(&dir.join(file), false)?;
            if ds.input_dim() != d {
                return Err(DataError::Manifest(format!(
                    "{file}: feature width {} does not match manifest input_dim {d}",
                    ds.input_dim()
                )));
            }
            if let Some(&bad) = ds.labels().iter().find(|&&l| l >= k) {
                return Err(DataError::Manifest(format!(
                    "{file}: label {bad} out of range for {k} classes"
                )));
            }
            Dataset::new(ds.features.clone(), ds.labels.clone(), k)
        };
        let anchor = AnchorSplits {
            train: load_split("anchor_train.csv")?,
            val: load_split("anchor_val.csv")?,
            test: load_split("anchor_test.csv")?,
        };
        let mut shifted = Vec::with_capacity(manifest.domains.len() - 1);
        for spec in &manifest.domains[1..] {
            let eval = load_split(&format!("domain_{}.csv", spec.name))?;
            shifted.push(ShiftedDomain {
                spec: spec.clone(),
                eval,
            });
        }
        // Prototypes are re-derived from the seed; they are generation
        // metadata, not training data.
        let regenerated = suite_from_manifest(&manifest)?;
        Ok(DomainSuite {
            num_classes: k,
            input_dim: d,
            prototypes: regenerated.prototypes,
            anchor_spec: manifest.domains[0].clone(),
            anchor,
            shifted,
            prototypes_seed: manifest.prototypes_seed,
            gen_seed: manifest.gen_seed,
            counts: manifest.counts,
        })
    }
}

/// Default seed for prototype placement.
pub const DEFAULT_PROTOTYPES_SEED: u64 = 101;
/// Default seed for domain sample streams.
pub const DEFAULT_GEN_SEED: u64 = 2024;

/// The default suite: 1 anchor plus 14 shifted domains, 3 classes,
/// 16 input features, angles 0.1..1.4 in steps of 0.1, unit noise.
pub fn default_domain_specs() -> Vec<DomainSpec> {
    let mut specs = vec![DomainSpec::anchor("anchor", 1.0)];
    for m in 1..=14 {
        specs.push(DomainSpec {
            name: format!("shift{m:02}"),
            shift_angle: 0.1 * m as f64,
            shift_bias: vec![],
            noise_sigma: 1.0,
        });
    }
    specs
}

/// Default suite dimensions and counts used by the CLI and experiments.
pub fn default_manifest(prototypes_seed: u64, gen_seed: u64) -> SuiteManifest {
    SuiteManifest {
        num_classes: 3,
        input_dim: 16,
        prototypes_seed,
        gen_seed,
        counts: SplitCounts {
            train: 2000,
            val: 500,
            test: 500,
        },
        domains: default_domain_specs(),
    }
}
