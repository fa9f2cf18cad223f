use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use gemmed::dataset::{bipartite_split, generate_synthetic, load_csv, write_csv};
use gemmed::evaluate::{cv_gamma, decision_score};
use gemmed::gem::{fit_gem, knn_distance};
use gemmed::trainer::{train_logged, train_med_logged};
use gemmed::{Dataset, IterRecord, Label, LooDetector, TrainedModel};

use crate::settings::Settings;

/// Output sink: the `--out` file, or stdout.
pub fn open_out(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot write {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| anyhow!("missing --{what}"))
}

fn csv_headers(path: &Path) -> Result<Vec<String>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    Ok(rdr.headers()?.iter().map(str::to_string).collect())
}

/// Loads a labeled CSV; an `anomaly` column, if present, is read as truth.
pub fn load_labeled(path: &Path, label_column: &str) -> Result<Dataset> {
    let headers = csv_headers(path)?;
    let anomaly = headers.iter().any(|h| h == "anomaly").then_some("anomaly");
    Ok(load_csv(path, label_column, anomaly)?)
}

pub type Queries = (Vec<Vec<f64>>, Option<Vec<Label>>);

/// Reads the `x1..x{dim}` columns of a CSV plus the label column if present.
pub fn load_queries(path: &Path, dim: usize, label_column: &str) -> Result<Queries> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let headers = rdr.headers()?.clone();
    let mut cols = Vec::with_capacity(dim);
    for j in 1..=dim {
        let name = format!("x{j}");
        let idx = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow!("{}: no column `{name}`; the model has {dim} features", path.display()))?;
        cols.push(idx);
    }
    let extra = headers
        .iter()
        .filter(|h| h.starts_with('x') && h[1..].parse::<usize>().is_ok_and(|j| j > dim))
        .count();
    if extra > 0 {
        bail!("{}: {} feature columns beyond the model's {dim}", path.display(), extra);
    }
    let label_idx = headers.iter().position(|h| h == label_column);
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.with_context(|| format!("{}: row {}", path.display(), i + 1))?;
        let mut x = Vec::with_capacity(dim);
        for &c in &cols {
            x.push(
                rec[c]
                    .parse::<f64>()
                    .map_err(|_| anyhow!("{}: row {}: `{}` is not a number", path.display(), i + 1, &rec[c]))?,
            );
        }
        points.push(x);
        if let Some(l) = label_idx {
            let v: f64 = rec[l]
                .parse()
                .map_err(|_| anyhow!("{}: row {}: bad label `{}`", path.display(), i + 1, &rec[l]))?;
            labels.push(if v > 0.0 { Label::Pos } else { Label::Neg });
        }
    }
    Ok((points, label_idx.map(|_| labels)))
}

pub fn cmd_generate(s: &Settings) -> Result<String> {
    let ds = generate_synthetic(&s.synthetic(s.seed, s.ring_radius, s.corruption_rate))?;
    let mut w = open_out(s.out.as_deref())?;
    write_csv(&ds, &mut w)?;
    w.flush()?;
    let [neg, pos] = ds.class_counts();
    let anomalies = ds.anomaly_truth().map_or(0, |t| t.iter().filter(|&&a| a).count());
    Ok(format!(
        "generated {} samples: {pos} labeled +1, {neg} labeled -1, {anomalies} anomalies",
        ds.len()
    ))
}

/// Fits GEM-MED (or plain MED with `baseline = med`) and writes the model.
/// One log line per iteration goes to `log`.
pub fn cmd_train(s: &Settings, log: &mut dyn Write) -> Result<TrainedModel> {
    let input = required(&s.input, "input")?;
    let out = required(&s.out, "out")?;
    let ds = load_labeled(input, &s.label_column)?;
    let spec = s.kernel_spec();
    let prior = s.prior();
    let cfg = s.train_config();
    let start = Instant::now();
    let mut write_err = None;
    let mut on_iter = |r: &IterRecord| {
        if write_err.is_none() {
            if let Err(e) = writeln!(
                log,
                "iter={} objective={:.6} max_grad={:.6} wall_s={:.3}",
                r.iteration,
                r.objective,
                r.grad_norm,
                start.elapsed().as_secs_f64()
            ) {
                write_err = Some(e);
            }
        }
    };
    let model = if s.baseline_med {
        train_med_logged(&ds, &spec, &prior, &cfg, &mut on_iter)?
    } else {
        let split = bipartite_split(&ds, s.split_fraction, s.seed)?;
        let gem = fit_gem(&ds, &split, &s.gem_config())?;
        train_logged(&ds, &spec, &gem, &prior, &cfg, &mut on_iter)?
    };
    if let Some(e) = write_err {
        return Err(e.into());
    }
    model
        .save(out)
        .with_context(|| format!("cannot write model {}", out.display()))?;
    Ok(model)
}

pub fn cmd_predict(s: &Settings) -> Result<usize> {
    let model = TrainedModel::load(required(&s.model, "model")?)?;
    let (points, _) = load_queries(required(&s.input, "input")?, model.dim(), &s.label_column)?;
    let mut w = csv::Writer::from_writer(open_out(s.out.as_deref())?);
    w.write_record(["index", "score", "decision"])?;
    for (i, x) in points.iter().enumerate() {
        let score = decision_score(&model, x)?;
        let decision = if score >= 0.0 { "1" } else { "-1" };
        w.write_record([i.to_string(), score.to_string(), decision.to_string()])?;
    }
    w.flush()?;
    Ok(points.len())
}

/// Per-class leave-one-out detector calibrated on the model's training
/// support at false-alarm level `alpha`. Rows with a label are compared to
/// their own class; unlabeled rows are anomalous only if anomalous for both.
pub fn cmd_detect(s: &Settings) -> Result<usize> {
    let model = TrainedModel::load(required(&s.model, "model")?)?;
    let support = Dataset::from_parts(model.features.clone(), model.labels.clone())?;
    let detector = LooDetector::fit(&support, s.k, s.alpha)?;
    let (points, labels) = load_queries(required(&s.input, "input")?, model.dim(), &s.label_column)?;
    let mut w = csv::Writer::from_writer(open_out(s.out.as_deref())?);
    w.write_record(["index", "score", "decision", "threshold"])?;
    let mut flagged = 0;
    for (i, x) in points.iter().enumerate() {
        let classes: Vec<Label> = match &labels {
            Some(l) => vec![l[i]],
            None => Label::BOTH.to_vec(),
        };
        let mut best: Option<(f64, f64)> = None;
        for z in classes {
            let d = knn_distance(x, &detector.references[z.index()], detector.k)?;
            let t = detector.threshold[z.index()];
            if best.is_none_or(|(bd, bt)| d - t < bd - bt) {
                best = Some((d, t));
            }
        }
        let (score, threshold) = best.expect("at least one class");
        let anomalous = score > threshold;
        flagged += usize::from(anomalous);
        w.write_record([
            i.to_string(),
            score.to_string(),
            if anomalous { "1" } else { "0" }.to_string(),
            threshold.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(flagged)
}

pub fn cmd_cv_gamma(s: &Settings) -> Result<f64> {
    let ds = load_labeled(required(&s.input, "input")?, &s.label_column)?;
    let gamma = cv_gamma(&ds, &s.gammas, s.folds, &s.prior(), &s.train_config())?;
    if let Some(out) = &s.out {
        std::fs::write(out, format!("gamma={gamma}\n")).with_context(|| format!("cannot write {}", out.display()))?;
    }
    Ok(gamma)
}
