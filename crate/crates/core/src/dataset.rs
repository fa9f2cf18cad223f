//! Sample storage, CSV ingestion, the two-Gaussian + ring synthetic
//! generator and the per-class bipartite split used by the BP-kNN detector.

use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Binary class label, stored as ±1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i8", into = "i8")]
pub enum Label {
    Neg,
    Pos,
}

impl Label {
    pub const BOTH: [Label; 2] = [Label::Neg, Label::Pos];

    /// Slot in per-class arrays: `Neg` is 0, `Pos` is 1.
    #[inline]
    pub fn index(self) -> usize {
        match self {
            Label::Neg => 0,
            Label::Pos => 1,
        }
    }

    #[inline]
    pub fn sign(self) -> f64 {
        match self {
            Label::Neg => -1.0,
            Label::Pos => 1.0,
        }
    }

    pub fn from_sign(v: f64) -> Label {
        if v < 0.0 {
            Label::Neg
        } else {
            Label::Pos
        }
    }

    pub fn flip(self) -> Label {
        match self {
            Label::Neg => Label::Pos,
            Label::Pos => Label::Neg,
        }
    }
}

impl From<Label> for i8 {
    fn from(l: Label) -> i8 {
        match l {
            Label::Neg => -1,
            Label::Pos => 1,
        }
    }
}

impl TryFrom<i8> for Label {
    type Error = String;

    fn try_from(v: i8) -> std::result::Result<Self, Self::Error> {
        match v {
            -1 => Ok(Label::Neg),
            1 => Ok(Label::Pos),
            other => Err(format!("label must be -1 or +1, got {other}")),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", i8::from(*self))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: Label,
    /// Ground truth for evaluation only; never read by training.
    pub anomaly: Option<bool>,
}

/// A nonempty collection of samples sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    dim: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::degenerate("dataset is empty"))?;
        let dim = first.features.len();
        if dim == 0 {
            return Err(Error::degenerate("samples have no features"));
        }
        for s in &samples {
            if s.features.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: s.features.len(),
                });
            }
        }
        Ok(Dataset { samples, dim })
    }

    pub fn from_parts(features: Vec<Vec<f64>>, labels: Vec<Label>) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::Dimension {
                expected: features.len(),
                got: labels.len(),
            });
        }
        Dataset::new(
            features
                .into_iter()
                .zip(labels)
                .map(|(features, label)| Sample {
                    features,
                    label,
                    anomaly: None,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.samples[i].features
    }

    pub fn label(&self, i: usize) -> Label {
        self.samples[i].label
    }

    pub fn labels(&self) -> Vec<Label> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn signs(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.label.sign()).collect()
    }

    pub fn points(&self) -> Vec<&[f64]> {
        self.samples.iter().map(|s| s.features.as_slice()).collect()
    }

    /// Ground-truth anomaly flags, if every sample carries one.
    pub fn anomaly_truth(&self) -> Option<Vec<bool>> {
        self.samples.iter().map(|s| s.anomaly).collect()
    }

    pub fn class_indices(&self, label: Label) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.label(i) == label).collect()
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let mut counts = [0; 2];
        for s in &self.samples {
            counts[s.label.index()] += 1;
        }
        counts
    }

    /// Training operations need both labels present.
    pub fn require_both_classes(&self) -> Result<()> {
        let counts = self.class_counts();
        if counts[0] == 0 || counts[1] == 0 {
            return Err(Error::degenerate(format!(
                "both labels required, got {} negative and {} positive samples",
                counts[0], counts[1]
            )));
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Dataset::new(indices.iter().map(|&i| self.samples[i].clone()).collect())
    }

    pub fn with_labels_flipped(&self) -> Dataset {
        let samples = self
            .samples
            .iter()
            .map(|s| Sample {
                label: s.label.flip(),
                ..s.clone()
            })
            .collect();
        Dataset {
            samples,
            dim: self.dim,
        }
    }
}

fn parse_label(raw: &str) -> Option<Label> {
    let v: f64 = raw.trim().parse().ok()?;
    if v == 1.0 {
        Some(Label::Pos)
    } else if v == -1.0 || v == 0.0 {
        Some(Label::Neg)
    } else {
        None
    }
}

fn parse_flag(raw: &str) -> Option<bool> {
    match raw.trim() {
        "1" | "1.0" | "true" | "TRUE" | "True" => Some(true),
        "0" | "0.0" | "-1" | "false" | "FALSE" | "False" => Some(false),
        _ => None,
    }
}

/// Reads a dataset from a CSV file with a header row.
///
/// Every column other than the label and anomaly columns is a feature.
/// Labels may be written as `-1/+1` or `0/1`; `0` maps to `-1`.
/// Row numbers in errors count data rows from 1.
pub fn load_csv(path: &Path, label_column: &str, anomaly_column: Option<&str>) -> Result<Dataset> {
    let file = File::open(path)?;
    read_csv(file, path, label_column, anomaly_column)
}

pub fn read_csv<R: Read>(
    reader: R,
    source: &Path,
    label_column: &str,
    anomaly_column: Option<&str>,
) -> Result<Dataset> {
    let parse_err = |row: usize, msg: String| Error::Parse {
        path: source.to_path_buf(),
        row,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let label_idx =
        find(label_column).ok_or_else(|| parse_err(0, format!("no label column `{label_column}`")))?;
    let anomaly_idx = match anomaly_column {
        Some(name) => {
            Some(find(name).ok_or_else(|| parse_err(0, format!("no anomaly column `{name}`")))?)
        }
        None => None,
    };
    let feature_idx: Vec<usize> = (0..headers.len())
        .filter(|&i| i != label_idx && Some(i) != anomaly_idx)
        .collect();
    if feature_idx.is_empty() {
        return Err(parse_err(0, "no feature columns".into()));
    }

    let mut samples = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| parse_err(row, e.to_string()))?;
        if record.len() != headers.len() {
            return Err(parse_err(
                row,
                format!("expected {} fields, found {}", headers.len(), record.len()),
            ));
        }
        let mut features = Vec::with_capacity(feature_idx.len());
        for &j in &feature_idx {
            let v: f64 = record[j].parse().map_err(|_| {
                parse_err(row, format!("column `{}`: `{}` is not a number", &headers[j], &record[j]))
            })?;
            features.push(v);
        }
        let label = parse_label(&record[label_idx])
            .ok_or_else(|| parse_err(row, format!("unknown label value `{}`", &record[label_idx])))?;
        let anomaly = match anomaly_idx {
            Some(j) => Some(
                parse_flag(&record[j])
                    .ok_or_else(|| parse_err(row, format!("bad anomaly flag `{}`", &record[j])))?,
            ),
            None => None,
        };
        samples.push(Sample {
            features,
            label,
            anomaly,
        });
    }
    Dataset::new(samples)
}

/// Writes `x1..xp,y[,anomaly]`. Floats use the shortest representation
/// that parses back to the same bits.
pub fn write_csv<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let with_anomaly = ds.anomaly_truth().is_some();
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (1..=ds.dim()).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    if with_anomaly {
        header.push("anomaly".into());
    }
    w.write_record(&header)?;
    for s in ds.samples() {
        let mut row: Vec<String> = s.features.iter().map(|v| format!("{v:?}")).collect();
        row.push(s.label.to_string());
        if with_anomaly {
            row.push(if s.anomaly == Some(true) { "1" } else { "0" }.into());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    write_csv(ds, File::create(path)?)
}

/// Two Gaussian classes with means ±`mean_plus` and a shared covariance,
/// corrupted by points drawn uniformly from an annulus around the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub mean_plus: [f64; 2],
    pub covariance: [[f64; 2]; 2],
    pub n_per_class: usize,
    pub corruption_rate: f64,
    pub ring_inner_radius: f64,
    pub ring_width: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            mean_plus: [3.0, 3.0],
            covariance: [[20.0, 16.0], [16.0, 20.0]],
            n_per_class: 100,
            corruption_rate: 0.2,
            ring_inner_radius: 55.0,
            ring_width: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    /// Lower Cholesky factor of the covariance.
    fn cov_factor(&self) -> Result<[[f64; 2]; 2]> {
        let [[a, b], [c, d]] = self.covariance;
        if !(a.is_finite() && b.is_finite() && d.is_finite()) || b != c {
            return Err(Error::config("covariance must be finite and symmetric"));
        }
        if a <= 0.0 || a * d - b * b <= 0.0 {
            return Err(Error::config("covariance must be positive definite"));
        }
        let l11 = a.sqrt();
        let l21 = b / l11;
        let l22 = (d - l21 * l21).sqrt();
        Ok([[l11, 0.0], [l21, l22]])
    }

    pub fn validate(&self) -> Result<()> {
        self.cov_factor()?;
        if self.n_per_class == 0 {
            return Err(Error::config("n_per_class must be positive"));
        }
        if !(0.0..1.0).contains(&self.corruption_rate) {
            return Err(Error::config("corruption_rate must lie in [0, 1)"));
        }
        if self.ring_inner_radius.is_nan() || self.ring_inner_radius <= 0.0 || self.ring_width.is_nan() || self.ring_width <= 0.0 {
            return Err(Error::config("ring radius and width must be positive"));
        }
        if !self.mean_plus.iter().all(|v| v.is_finite()) {
            return Err(Error::config("mean must be finite"));
        }
        Ok(())
    }

    pub fn nominal_per_class(&self) -> usize {
        (self.n_per_class as f64 * (1.0 - self.corruption_rate)).round() as usize
    }
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let l = cfg.cov_factor()?;
    let mut rng = rng::stream(cfg.seed, "synthetic", &[]);
    let n_nominal = cfg.nominal_per_class();
    let r_in = cfg.ring_inner_radius;
    let r_out = r_in + cfg.ring_width;
    let mut samples = Vec::with_capacity(2 * cfg.n_per_class);

    for label in [Label::Pos, Label::Neg] {
        let z = label.sign();
        let mean = [z * cfg.mean_plus[0], z * cfg.mean_plus[1]];
        for _ in 0..n_nominal {
            let e0: f64 = rng.sample(StandardNormal);
            let e1: f64 = rng.sample(StandardNormal);
            samples.push(Sample {
                features: vec![mean[0] + l[0][0] * e0, mean[1] + l[1][0] * e0 + l[1][1] * e1],
                label,
                anomaly: Some(false),
            });
        }
        for _ in n_nominal..cfg.n_per_class {
            // area-uniform radius on the annulus
            let u: f64 = rng.random();
            let r = (r_in * r_in + u * (r_out * r_out - r_in * r_in)).sqrt();
            let theta = std::f64::consts::TAU * rng.random::<f64>();
            let label = if rng.random_bool(0.5) {
                Label::Pos
            } else {
                Label::Neg
            };
            samples.push(Sample {
                features: vec![r * theta.cos(), r * theta.sin()],
                label,
                anomaly: Some(true),
            });
        }
    }
    Dataset::new(samples)
}

/// Per-class partition into candidate points (scored) and reference
/// points (the neighbor pool).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BipartiteSplit {
    /// Candidate indices per class, indexed by [`Label::index`].
    pub part_n: [Vec<usize>; 2],
    /// Reference indices per class.
    pub part_m: [Vec<usize>; 2],
    pub split_fraction: f64,
}

impl BipartiteSplit {
    pub fn candidates(&self, label: Label) -> &[usize] {
        &self.part_n[label.index()]
    }

    pub fn references(&self, label: Label) -> &[usize] {
        &self.part_m[label.index()]
    }
}

/// Random per-class partition with `max(1, round(fraction * size))`
/// reference points, capped so that at least one candidate remains.
pub fn bipartite_split(ds: &Dataset, split_fraction: f64, seed: u64) -> Result<BipartiteSplit> {
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(Error::config("split_fraction must lie in (0, 1)"));
    }
    let mut part_n: [Vec<usize>; 2] = Default::default();
    let mut part_m: [Vec<usize>; 2] = Default::default();
    for label in Label::BOTH {
        let mut idx = ds.class_indices(label);
        if idx.len() < 2 {
            return Err(Error::degenerate(format!(
                "class {label} has {} samples; the bipartite split needs at least 2",
                idx.len()
            )));
        }
        let mut rng = rng::stream(seed, "bipartite", &[label.index() as u64]);
        idx.shuffle(&mut rng);
        let m = ((split_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        let mut refs = idx[..m].to_vec();
        let mut cands = idx[m..].to_vec();
        refs.sort_unstable();
        cands.sort_unstable();
        part_m[label.index()] = refs;
        part_n[label.index()] = cands;
    }
    Ok(BipartiteSplit {
        part_n,
        part_m,
        split_fraction,
    })
}
