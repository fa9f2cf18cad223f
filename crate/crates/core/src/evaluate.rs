//! Prediction, anomaly-ranking metrics and the baseline methods.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Label};
use crate::error::{Error, Result};
use crate::gem::LooDetector;
use crate::kernel::KernelSpec;
use crate::posterior::PriorConfig;
use crate::rng;
use crate::trainer::{train_med, TrainConfig, TrainedModel};
use rand::seq::SliceRandom;

/// `Σ_n η̂_n λ_n y_n K(x, x_n)`.
pub fn decision_score(model: &TrainedModel, x: &[f64]) -> Result<f64> {
    if x.len() != model.dim() {
        return Err(Error::Dimension {
            expected: model.dim(),
            got: x.len(),
        });
    }
    let mut s = 0.0;
    for n in 0..model.len() {
        let w = model.eta_hat[n] * model.dual.lambda[n];
        if w != 0.0 {
            s += w * model.labels[n].sign() * model.kernel.eval_unchecked(x, &model.features[n]);
        }
    }
    Ok(s)
}

/// Sign of the decision score; zero maps to `+1`.
pub fn predict(model: &TrainedModel, x: &[f64]) -> Result<Label> {
    Ok(if decision_score(model, x)? >= 0.0 {
        Label::Pos
    } else {
        Label::Neg
    })
}

/// Fraction of `test` whose prediction differs from its label.
pub fn misclassification(model: &TrainedModel, test: &Dataset) -> Result<f64> {
    let mut wrong = 0usize;
    for s in test.samples() {
        if predict(model, &s.features)? != s.label {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / test.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub cutoff: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Flags `η̂_n ≤ ρ_c` for every cutoff and scores the flags against the truth.
pub fn precision_recall(eta_hat: &[f64], truth: &[bool], cutoffs: &[f64]) -> Result<Vec<PrPoint>> {
    if eta_hat.len() != truth.len() {
        return Err(Error::Dimension {
            expected: truth.len(),
            got: eta_hat.len(),
        });
    }
    let positives = truth.iter().filter(|&&t| t).count();
    if positives == 0 {
        return Err(Error::degenerate("no true anomalies; recall is undefined"));
    }
    Ok(cutoffs
        .iter()
        .map(|&cutoff| {
            let mut flagged = 0usize;
            let mut hits = 0usize;
            for (&e, &t) in eta_hat.iter().zip(truth) {
                if e <= cutoff {
                    flagged += 1;
                    hits += usize::from(t);
                }
            }
            PrPoint {
                cutoff,
                precision: if flagged == 0 { 1.0 } else { hits as f64 / flagged as f64 },
                recall: hits as f64 / positives as f64,
            }
        })
        .collect())
}

/// ROC area of `scores` (higher = more anomalous) by the Mann-Whitney
/// statistic, ties counted half.
pub fn auc(scores: &[f64], truth: &[bool]) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(Error::Dimension {
            expected: truth.len(),
            got: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::degenerate("scores contain NaN"));
    }
    let pos = truth.iter().filter(|&&t| t).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::degenerate("AUC needs both anomalous and nominal samples"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the Mann-Whitney U, kept integral
    let mut twice_u: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let (mut p, mut q) = (0u64, 0u64);
        for &k in &order[i..j] {
            if truth[k] {
                p += 1;
            } else {
                q += 1;
            }
        }
        twice_u += p * (2 * neg_below + q);
        neg_below += q;
        i = j;
    }
    Ok(twice_u as f64 / 2.0 / (pos as f64 * neg as f64))
}

/// Anomaly scores from posterior nominality: `−η̂`.
pub fn anomaly_scores(eta_hat: &[f64]) -> Vec<f64> {
    eta_hat.iter().map(|e| -e).collect()
}

/// Plain MED: the trainer with `η ≡ 1` and `μ = κ = 0`.
pub fn baseline_med(ds: &Dataset, spec: &KernelSpec, prior: &PriorConfig, cfg: &TrainConfig) -> Result<TrainedModel> {
    train_med(ds, spec, prior, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStage {
    pub model: TrainedModel,
    /// Training samples screened out before fitting.
    pub removed: Vec<bool>,
}

/// Screens the training set with a per-class leave-one-out k-NN detector at
/// false-alarm level `alpha`, then fits plain MED on what remains.
pub fn baseline_two_stage(
    ds: &Dataset,
    spec: &KernelSpec,
    k: usize,
    prior: &PriorConfig,
    cfg: &TrainConfig,
    alpha: f64,
) -> Result<TwoStage> {
    let detector = LooDetector::fit(ds, k, alpha)?;
    let removed = detector.training_flags(ds);
    let keep: Vec<usize> = (0..ds.len()).filter(|&i| !removed[i]).collect();
    if keep.is_empty() {
        return Err(Error::degenerate("screening removed every training sample"));
    }
    let kept = ds.subset(&keep)?;
    let model = train_med(&kept, spec, prior, cfg)?;
    Ok(TwoStage { model, removed })
}

/// Stratified fold assignment: each class is shuffled and dealt round-robin.
pub fn stratified_folds(ds: &Dataset, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::config("need at least 2 folds"));
    }
    let mut assign = vec![0; ds.len()];
    for z in Label::BOTH {
        let mut idx = ds.class_indices(z);
        idx.shuffle(&mut rng::stream(seed, "folds", &[z.index() as u64]));
        for (pos, i) in idx.into_iter().enumerate() {
            assign[i] = pos % folds;
        }
    }
    Ok(assign)
}

/// Picks the RBF `γ` with the lowest mean fold error of plain MED; ties go
/// to the smaller `γ`.
pub fn cv_gamma(
    ds: &Dataset,
    gamma_grid: &[f64],
    folds: usize,
    prior: &PriorConfig,
    cfg: &TrainConfig,
) -> Result<f64> {
    if gamma_grid.is_empty() {
        return Err(Error::config("gamma grid is empty"));
    }
    let assign = stratified_folds(ds, folds, cfg.seed)?;
    let mut splits = Vec::with_capacity(folds);
    for f in 0..folds {
        let train_idx: Vec<usize> = (0..ds.len()).filter(|&i| assign[i] != f).collect();
        let test_idx: Vec<usize> = (0..ds.len()).filter(|&i| assign[i] == f).collect();
        if test_idx.is_empty() {
            return Err(Error::degenerate(format!("fold {f} is empty")));
        }
        let train = ds.subset(&train_idx)?;
        if train.require_both_classes().is_err() {
            return Err(Error::degenerate(format!("training part of fold {f} has one class")));
        }
        splits.push((train, ds.subset(&test_idx)?));
    }
    let mut best: Option<(f64, f64)> = None;
    let mut grid = gamma_grid.to_vec();
    grid.sort_by(|a, b| a.total_cmp(b));
    for &gamma in &grid {
        let spec = KernelSpec::rbf(gamma);
        spec.validate()?;
        let mut total = 0.0;
        for (train, test) in &splits {
            let model = train_med(train, &spec, prior, cfg)?;
            total += misclassification(&model, test)?;
        }
        let mean = total / folds as f64;
        if best.is_none_or(|(_, e)| mean < e) {
            best = Some((gamma, mean));
        }
    }
    Ok(best.expect("grid is nonempty").0)
}

/// Metrics for one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub error_rate: f64,
    pub precision_recall: Vec<PrPoint>,
    /// ROC area of `−η̂` against the training anomaly truth, when available.
    pub auc: Option<f64>,
}

/// Test error plus, if the training set carries anomaly truth, the
/// ranking quality of `η̂` on it.
pub fn evaluate(model: &TrainedModel, train_truth: Option<&[bool]>, test: &Dataset, cutoffs: &[f64]) -> Result<EvalReport> {
    let error_rate = misclassification(model, test)?;
    let (precision_recall, auc) = match train_truth {
        Some(truth) if truth.iter().any(|&t| t) && !truth.iter().all(|&t| t) => (
            precision_recall(&model.eta_hat, truth, cutoffs)?,
            Some(auc(&anomaly_scores(&model.eta_hat), truth)?),
        ),
        _ => (Vec::new(), None),
    };
    Ok(EvalReport {
        error_rate,
        precision_recall,
        auc,
    })
}
