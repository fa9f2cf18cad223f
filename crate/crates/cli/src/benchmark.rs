//! The synthetic benchmark grid: ring radius × corruption rate × replicate
//! × method, each cell on its own random streams.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use gemmed::dataset::{bipartite_split, generate_synthetic};
use gemmed::evaluate::{anomaly_scores, auc, baseline_med, baseline_two_stage, misclassification};
use gemmed::gem::fit_gem;
use gemmed::rng::derive_seed;
use gemmed::trainer::train;
use rayon::prelude::*;
use serde::Serialize;

use crate::settings::{Method, Settings};

pub const CSV_HEADER: [&str; 9] = ["method", "seed", "R", "r_a", "status", "error", "auc", "runtime_s", "message"];

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: Method,
    pub seed: u64,
    pub radius: f64,
    pub rate: f64,
    pub error: Option<f64>,
    pub auc: Option<f64>,
    pub runtime_s: Option<f64>,
    /// Set when the cell failed.
    pub failure: Option<String>,
}

impl BenchRow {
    pub fn is_error(&self) -> bool {
        self.failure.is_some()
    }

    fn record(&self) -> [String; 9] {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        [
            self.method.to_string(),
            self.seed.to_string(),
            self.radius.to_string(),
            self.rate.to_string(),
            if self.is_error() { "error" } else { "ok" }.to_string(),
            opt(self.error),
            opt(self.auc),
            opt(self.runtime_s),
            self.failure.clone().unwrap_or_default(),
        ]
    }
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    radius_idx: usize,
    rate_idx: usize,
    seed: u64,
    method_idx: usize,
}

fn cell_coords(s: &Settings, c: &Cell) -> [u64; 3] {
    [s.radii[c.radius_idx].to_bits(), s.rates[c.rate_idx].to_bits(), c.seed]
}

fn run_cell(s: &Settings, c: &Cell) -> BenchRow {
    let method = s.methods[c.method_idx];
    let radius = s.radii[c.radius_idx];
    let rate = s.rates[c.rate_idx];
    let start = Instant::now();
    let outcome = evaluate_cell(s, c, method, radius, rate);
    let runtime_s = s.timing.then(|| start.elapsed().as_secs_f64());
    let (error, auc, failure) = match outcome {
        Ok((e, a)) => (Some(e), a, None),
        Err(e) => (None, None, Some(format!("{e:#}"))),
    };
    BenchRow {
        method,
        seed: c.seed,
        radius,
        rate,
        error,
        auc,
        runtime_s,
        failure,
    }
}

/// Test error and, where the method produces a ranking, the ROC area of
/// that ranking against the training anomaly truth.
fn evaluate_cell(s: &Settings, c: &Cell, method: Method, radius: f64, rate: f64) -> Result<(f64, Option<f64>)> {
    let coords = cell_coords(s, c);
    let train_ds = generate_synthetic(&s.synthetic(derive_seed(s.seed, "bench-train", &coords), radius, rate))?;
    let mut test_cfg = s.synthetic(derive_seed(s.seed, "bench-test", &coords), radius, 0.0);
    test_cfg.n_per_class = s.test_per_class;
    let test_ds = generate_synthetic(&test_cfg)?;
    let truth = train_ds.anomaly_truth().unwrap_or_default();
    let ranked = |scores: &[f64]| -> Result<Option<f64>> {
        if truth.iter().any(|&t| t) && truth.iter().any(|&t| !t) {
            Ok(Some(auc(scores, &truth)?))
        } else {
            Ok(None)
        }
    };
    let spec = s.kernel_spec();
    let prior = s.prior();
    let mut cfg = s.train_config();
    cfg.seed = derive_seed(s.seed, "bench-trainer", &coords);
    match method {
        Method::GemMed => {
            let split = bipartite_split(&train_ds, s.split_fraction, derive_seed(s.seed, "bench-split", &coords))?;
            let gem = fit_gem(&train_ds, &split, &s.gem_config())?;
            let model = train(&train_ds, &spec, &gem, &prior, &cfg)?;
            let err = misclassification(&model, &test_ds)?;
            Ok((err, ranked(&anomaly_scores(&model.eta_hat))?))
        }
        Method::Med => {
            let model = baseline_med(&train_ds, &spec, &prior, &cfg)?;
            Ok((misclassification(&model, &test_ds)?, None))
        }
        Method::GemPlusMed => {
            let two = baseline_two_stage(&train_ds, &spec, s.k, &prior, &cfg, s.screen_alpha)?;
            let err = misclassification(&two.model, &test_ds)?;
            let scores: Vec<f64> = two.removed.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect();
            Ok((err, ranked(&scores)?))
        }
    }
}

/// Runs every cell on a pool of `threads` workers (all cores if `None`)
/// and returns rows in grid order.
pub fn run_grid(s: &Settings) -> Result<Vec<BenchRow>> {
    let mut cells = Vec::new();
    for radius_idx in 0..s.radii.len() {
        for rate_idx in 0..s.rates.len() {
            for seed in 0..s.seeds as u64 {
                for method_idx in 0..s.methods.len() {
                    cells.push(Cell {
                        radius_idx,
                        rate_idx,
                        seed,
                        method_idx,
                    });
                }
            }
        }
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = s.threads {
        builder = builder.num_threads(t);
    }
    let pool = builder.build().context("cannot start worker pool")?;
    // par_iter().collect() keeps input order regardless of scheduling
    Ok(pool.install(|| cells.par_iter().map(|c| run_cell(s, c)).collect()))
}

pub fn write_rows<W: Write>(rows: &[BenchRow], w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSummary {
    pub n: usize,
    pub mean: f64,
    /// Standard error of the mean; zero for a single value.
    pub se: f64,
}

impl MetricSummary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Some(MetricSummary { n, mean, se })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub method: String,
    #[serde(rename = "R")]
    pub radius: f64,
    pub r_a: f64,
    pub errors: usize,
    pub error: Option<MetricSummary>,
    pub auc: Option<MetricSummary>,
}

/// Means and standard errors per (method, R, r_a), in grid order.
pub fn summarize(s: &Settings, rows: &[BenchRow]) -> Vec<GroupSummary> {
    let mut groups: BTreeMap<(usize, usize, usize), Vec<&BenchRow>> = BTreeMap::new();
    for r in rows {
        let key = (
            s.radii.iter().position(|&v| v == r.radius).unwrap_or(usize::MAX),
            s.rates.iter().position(|&v| v == r.rate).unwrap_or(usize::MAX),
            s.methods.iter().position(|&m| m == r.method).unwrap_or(usize::MAX),
        );
        groups.entry(key).or_default().push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let errors: Vec<f64> = g.iter().filter_map(|r| r.error).collect();
            let aucs: Vec<f64> = g.iter().filter_map(|r| r.auc).collect();
            GroupSummary {
                method: g[0].method.to_string(),
                radius: g[0].radius,
                r_a: g[0].rate,
                errors: g.iter().filter(|r| r.is_error()).count(),
                error: MetricSummary::of(&errors),
                auc: MetricSummary::of(&aucs),
            }
        })
        .collect()
}

/// Summary path next to the CSV: same stem, `.json` extension.
pub fn summary_path(csv: &Path) -> std::path::PathBuf {
    csv.with_extension("json")
}

/// Runs the grid and writes the CSV (and, with a file output, the JSON
/// summary). Returns the rows; callers decide what error rows mean.
pub fn cmd_benchmark(s: &Settings) -> Result<Vec<BenchRow>> {
    let rows = run_grid(s)?;
    match &s.out {
        Some(path) => {
            let f = std::fs::File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
            write_rows(&rows, std::io::BufWriter::new(f))?;
            let json = serde_json::to_string_pretty(&summarize(s, &rows))?;
            let sp = summary_path(path);
            std::fs::write(&sp, json + "\n").with_context(|| format!("cannot write {}", sp.display()))?;
        }
        None => write_rows(&rows, std::io::stdout().lock())?,
    }
    Ok(rows)
}
