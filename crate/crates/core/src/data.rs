//! Synthetic multi-domain benchmarks and CSV shard I/O.
//!
//! A benchmark is one labeled source domain (Gaussian class clusters) plus
//! `N` target domains, each a label-preserving affine transform of fresh
//! draws from the source generator: block-planar rotation, scaling,
//! translation, and additive noise. Client training shards are unlabeled
//! and subsampled to a configurable fraction with stratified selection.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::seed::{derive, TAG_DATA_CENTERS, TAG_DATA_SOURCE, TAG_DATA_SUBSAMPLE, TAG_DATA_TARGET};
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One domain's data as held by a single participant.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainShard {
    pub inputs: Tensor,
    /// Present for the source and for test shards; absent for client
    /// training shards.
    pub labels: Option<Vec<usize>>,
    pub domain: String,
    pub split: Split,
}

impl DomainShard {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// One-hot label matrix `[n, num_classes]`; panics when unlabeled.
    pub fn one_hot_labels(&self, num_classes: usize) -> Tensor {
        let labels = self.labels.as_ref().expect("shard has no labels");
        let n = labels.len();
        let mut data = vec![0.0; n * num_classes];
        for (i, &l) in labels.iter().enumerate() {
            assert!(l < num_classes, "label {} out of range", l);
            data[i * num_classes + l] = 1.0;
        }
        Tensor::new(vec![n, num_classes], data)
    }

    /// Rows (and labels, when present) selected by `idx`.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Option<Vec<usize>>) {
        let inputs = self.inputs.gather_rows(idx);
        let labels = self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
        (inputs, labels)
    }
}

/// Distribution shift applied to one target domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    /// Radians, applied as planar rotations on coordinate pairs (0,1), (2,3), …
    #[serde(default)]
    pub rotation: f64,
    /// Added after rotation and scaling; length must equal the benchmark dims.
    #[serde(default)]
    pub translation: Vec<f64>,
    #[serde(default = "one")]
    pub scale: f64,
    /// Stddev of isotropic Gaussian noise added last.
    #[serde(default)]
    pub noise: f64,
}

fn one() -> f64 {
    1.0
}

impl ShiftSpec {
    pub fn identity() -> Self {
        ShiftSpec { rotation: 0.0, translation: vec![], scale: 1.0, noise: 0.0 }
    }

    fn validate(&self, dims: usize) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::Config("shift scale must be > 0".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("shift noise must be ≥ 0".into()));
        }
        if !self.translation.is_empty() && self.translation.len() != dims {
            return Err(Error::Config(format!(
                "translation has {} entries but the benchmark has {} dims",
                self.translation.len(),
                dims
            )));
        }
        Ok(())
    }

    fn apply(&self, x: &[f64], noise_rng: &mut ChaCha8Rng) -> Vec<f64> {
        let d = x.len();
        let mut y = x.to_vec();
        if self.rotation != 0.0 {
            let (s, c) = self.rotation.sin_cos();
            for k in 0..d / 2 {
                let (a, b) = (y[2 * k], y[2 * k + 1]);
                y[2 * k] = c * a - s * b;
                y[2 * k + 1] = s * a + c * b;
            }
        }
        for (j, v) in y.iter_mut().enumerate() {
            *v *= self.scale;
            if !self.translation.is_empty() {
                *v += self.translation[j];
            }
            if self.noise > 0.0 {
                let n: f64 = noise_rng.sample(StandardNormal);
                *v += self.noise * n;
            }
        }
        y
    }
}

/// Generator settings for a full multi-domain benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub name: String,
    pub classes: usize,
    pub dims: usize,
    /// Examples generated per domain (before the training-fraction cut).
    pub per_domain: usize,
    pub shifts: Vec<ShiftSpec>,
    pub target_fraction: f64,
    /// Scale of the class-center layout relative to unit within-class noise.
    #[serde(default = "default_separation")]
    pub class_separation: f64,
    #[serde(default = "one")]
    pub within_class_stddev: f64,
}

fn default_separation() -> f64 {
    3.0
}

impl BenchmarkSpec {
    pub fn num_targets(&self) -> usize {
        self.shifts.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("benchmark needs at least 2 classes".into()));
        }
        if self.dims < 1 {
            return Err(Error::Config("benchmark dims must be ≥ 1".into()));
        }
        if self.per_domain < self.classes {
            return Err(Error::Config("per_domain must be ≥ classes".into()));
        }
        if self.shifts.is_empty() {
            return Err(Error::Config("benchmark needs at least one target shift".into()));
        }
        if !(self.target_fraction > 0.0 && self.target_fraction <= 1.0) {
            return Err(Error::Config("target_fraction must be in (0, 1]".into()));
        }
        if !(self.class_separation > 0.0) || !(self.within_class_stddev > 0.0) {
            return Err(Error::Config("separation and stddev must be > 0".into()));
        }
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(Error::Config("benchmark name must be a simple identifier".into()));
        }
        for s in &self.shifts {
            s.validate(self.dims)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TargetPair {
    /// Unlabeled, subsampled to the training fraction.
    pub train: DomainShard,
    /// Labeled, full size.
    pub test: DomainShard,
}

#[derive(Clone, Debug)]
pub struct BenchmarkData {
    pub source: DomainShard,
    pub targets: Vec<TargetPair>,
}

/// Draws class centers, then per-domain examples with round-robin labels
/// (exact class balance). Bit-deterministic per seed.
pub fn gen_benchmark(spec: &BenchmarkSpec, seed: u64) -> Result<BenchmarkData> {
    spec.validate()?;
    let (c, d, n) = (spec.classes, spec.dims, spec.per_domain);

    let mut center_rng = ChaCha8Rng::seed_from_u64(derive(seed, &[TAG_DATA_CENTERS]));
    let scale = spec.class_separation / (d as f64).sqrt();
    let centers: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..d).map(|_| scale * center_rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();

    let draw = |rng: &mut ChaCha8Rng, count: usize| -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rows = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let label = i % c;
            let row: Vec<f64> = (0..d)
                .map(|j| {
                    centers[label][j]
                        + spec.within_class_stddev * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            rows.push(row);
            labels.push(label);
        }
        (rows, labels)
    };

    let mut source_rng = ChaCha8Rng::seed_from_u64(derive(seed, &[TAG_DATA_SOURCE]));
    let (src_rows, src_labels) = draw(&mut source_rng, n);
    let source = DomainShard {
        inputs: Tensor::from_rows(&src_rows),
        labels: Some(src_labels),
        domain: "source".into(),
        split: Split::Train,
    };

    let mut targets = Vec::with_capacity(spec.shifts.len());
    for (t, shift) in spec.shifts.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[TAG_DATA_TARGET, t as u64]));
        let (pool_rows, pool_labels) = draw(&mut rng, n);
        let shifted: Vec<Vec<f64>> = pool_rows.iter().map(|r| shift.apply(r, &mut rng)).collect();

        let (test_rows, test_labels) = draw(&mut rng, n);
        let test_shifted: Vec<Vec<f64>> = test_rows.iter().map(|r| shift.apply(r, &mut rng)).collect();

        let keep = stratified_indices(
            &pool_labels,
            c,
            spec.target_fraction,
            derive(seed, &[TAG_DATA_SUBSAMPLE, t as u64]),
        );
        let train_rows: Vec<Vec<f64>> = keep.iter().map(|&i| shifted[i].clone()).collect();

        targets.push(TargetPair {
            train: DomainShard {
                inputs: Tensor::from_rows(&train_rows),
                labels: None,
                domain: format!("target{}", t),
                split: Split::Train,
            },
            test: DomainShard {
                inputs: Tensor::from_rows(&test_shifted),
                labels: Some(test_labels),
                domain: format!("target{}", t),
                split: Split::Test,
            },
        });
    }

    Ok(BenchmarkData { source, targets })
}

/// Picks `round(n·fraction)` indices stratified by class with largest-
/// remainder quota allocation; selection within a class is seeded-random,
/// output indices ascending.
fn stratified_indices(labels: &[usize], classes: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let n = labels.len();
    let m = ((n as f64 * fraction).round() as usize).clamp(1, n);

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }

    let mut quota: Vec<usize> = Vec::with_capacity(classes);
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(classes);
    for (cls, members) in by_class.iter().enumerate() {
        let exact = members.len() as f64 * m as f64 / n as f64;
        quota.push(exact.floor() as usize);
        remainders.push((cls, exact - exact.floor()));
    }
    let assigned: usize = quota.iter().sum();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for k in 0..m.saturating_sub(assigned) {
        let cls = remainders[k % classes].0;
        if quota[cls] < by_class[cls].len() {
            quota[cls] += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(m);
    for (cls, members) in by_class.iter().enumerate() {
        let mut pool = members.clone();
        pool.shuffle(&mut rng);
        chosen.extend(pool.into_iter().take(quota[cls]));
    }
    chosen.sort_unstable();
    chosen
}

// ── CSV I/O ──────────────────────────────────────────────────────────────

/// Writes `x0..x{d−1}[,label]` rows; floats print in shortest form that
/// parses back bit-exactly.
pub fn save_shard(shard: &DomainShard, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::data(path, format!("cannot create: {}", e)))?;
    let d = shard.dim();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{}", j)).collect();
    if shard.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(|e| Error::data(path, e.to_string()))?;
    for i in 0..shard.len() {
        let mut rec: Vec<String> = shard.inputs.row(i).iter().map(|v| format!("{}", v)).collect();
        if let Some(labels) = &shard.labels {
            rec.push(labels[i].to_string());
        }
        w.write_record(&rec).map_err(|e| Error::data(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(format!("flushing {}", path.display()), e))
}

/// Reads a shard, inferring domain and split from the `{domain}_{split}`
/// file stem and enforcing the labeling convention: target training shards
/// must be unlabeled, everything else must be labeled.
pub fn load_shard(path: &Path) -> Result<DomainShard> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::data(path, "file name is not valid UTF-8"))?;
    let (domain, split) = match stem.rsplit_once('_') {
        Some((d, "train")) => (d.to_string(), Split::Train),
        Some((d, "test")) => (d.to_string(), Split::Test),
        _ => {
            return Err(Error::data(
                path,
                "file name must look like {domain}_{train|test}.csv",
            ))
        }
    };
    let expect_labels = !(domain.starts_with("target") && split == Split::Train);

    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::data(path, format!("cannot open: {}", e)))?;
    let header = rdr
        .headers()
        .map_err(|e| Error::data(path, format!("bad header: {}", e)))?
        .clone();
    if header.is_empty() || header.get(0).map_or(true, |h| !h.starts_with('x')) {
        return Err(Error::data(path, "missing x0.. feature header"));
    }
    let has_label = header.iter().last() == Some("label");
    let d = header.len() - usize::from(has_label);
    for (j, name) in header.iter().take(d).enumerate() {
        if name != format!("x{}", j) {
            return Err(Error::data(path, format!("expected column x{}, found {}", j, name)));
        }
    }
    if has_label && !expect_labels {
        return Err(Error::data(
            path,
            format!("{}_{} must be unlabeled but has a label column", domain, split.as_str()),
        ));
    }
    if !has_label && expect_labels {
        return Err(Error::data(
            path,
            format!("{}_{} must be labeled but has no label column", domain, split.as_str()),
        ));
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::data(path, format!("row {}: {}", line + 2, e)))?;
        if rec.len() != header.len() {
            return Err(Error::data(
                path,
                format!("row {}: expected {} fields, found {}", line + 2, header.len(), rec.len()),
            ));
        }
        let mut row = Vec::with_capacity(d);
        for j in 0..d {
            let v: f64 = rec[j].parse().map_err(|_| {
                Error::data(path, format!("row {}, column x{}: not a number: {:?}", line + 2, j, &rec[j]))
            })?;
            if !v.is_finite() {
                return Err(Error::data(path, format!("row {}, column x{}: non-finite", line + 2, j)));
            }
            row.push(v);
        }
        if has_label {
            let l: usize = rec[d].parse().map_err(|_| {
                Error::data(path, format!("row {}: bad label {:?}", line + 2, &rec[d]))
            })?;
            labels.push(l);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::data(path, "shard has no data rows"));
    }

    Ok(DomainShard {
        inputs: Tensor::from_rows(&rows),
        labels: has_label.then_some(labels),
        domain,
        split,
    })
}
