//! Projected stochastic gradient ascent on the dual variables.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Label};
use crate::error::{Error, Result};
use crate::gem::GemModel;
use crate::kernel::{self, GramMatrix, KernelSpec};
use crate::posterior::{
    self, exact_posterior, gibbs_run, Expectations, GibbsConfig, LatentTerms, PosteriorForm, PriorConfig,
};
use crate::rng;

/// First line of every model file.
pub const MODEL_HEADER: &str = "gemmed-model v1";

/// Dual variables: `λ` per sample, `μ` and `κ` per class (indexed by
/// [`Label::index`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub lambda: Vec<f64>,
    pub mu: [f64; 2],
    pub kappa: [f64; 2],
}

impl DualState {
    /// `λ = C₁/2`, `μ = κ = 0`.
    pub fn init(n: usize, c1: f64) -> Self {
        DualState {
            lambda: vec![c1 / 2.0; n],
            mu: [0.0; 2],
            kappa: [0.0; 2],
        }
    }

    pub fn is_feasible(&self, c1: f64) -> bool {
        self.lambda.iter().all(|&l| (0.0..=c1).contains(&l))
            && self.mu.iter().chain(&self.kappa).all(|&v| v >= 0.0)
    }
}

/// Where the expectations in the gradient come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PosteriorMode {
    #[default]
    Gibbs,
    /// Enumeration over `η`; small problems only.
    Exact,
    /// `η ≡ 1`, `μ = κ = 0`: plain MED on `λ`.
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Clip ceiling for `λ`; must be below the slack rate `c`.
    pub c1: f64,
    pub lr_lambda: f64,
    pub lr_mu: f64,
    pub lr_kappa: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    pub mode: PosteriorMode,
    pub gibbs: GibbsConfig,
    pub form: PosteriorForm,
    /// Fraction of the iteration budget, counted from the end, whose
    /// iterates are averaged into the returned solution; 0 keeps the last.
    #[serde(default)]
    pub tail_average: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            c1: 1.0,
            lr_lambda: 2e-3,
            lr_mu: 2e-2,
            lr_kappa: 3e-2,
            max_iters: 1500,
            tol: 1e-4,
            seed: 0,
            mode: PosteriorMode::Gibbs,
            gibbs: GibbsConfig::default(),
            form: PosteriorForm::default(),
            tail_average: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, prior: &PriorConfig) -> Result<()> {
        prior.validate()?;
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.c1) {
            return Err(Error::config("C1 must be positive"));
        }
        if self.c1 >= prior.c {
            return Err(Error::config(format!("C1 = {} must be below c = {}", self.c1, prior.c)));
        }
        if !(positive(self.lr_lambda) && positive(self.lr_mu) && positive(self.lr_kappa)) {
            return Err(Error::config("step sizes must be positive"));
        }
        if !positive(self.tol) {
            return Err(Error::config("tol must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::config("max_iters must be positive"));
        }
        if !(0.0..1.0).contains(&self.tail_average) {
            return Err(Error::config("tail_average must lie in [0, 1)"));
        }
        self.gibbs.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualGradient {
    pub lambda: Vec<f64>,
    pub mu: [f64; 2],
    pub kappa: [f64; 2],
}

impl DualGradient {
    pub fn max_abs(&self) -> f64 {
        self.lambda
            .iter()
            .chain(&self.mu)
            .chain(&self.kappa)
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    fn is_finite(&self) -> bool {
        self.lambda.iter().chain(&self.mu).chain(&self.kappa).all(|v| v.is_finite())
    }
}

/// Gradient of the dual objective given posterior expectations.
pub fn dual_gradients(
    e: &Expectations,
    dual: &DualState,
    prior: &PriorConfig,
    form: &PosteriorForm,
    terms: &LatentTerms,
    gamma_hat: &[f64; 2],
) -> Result<DualGradient> {
    let n = dual.lambda.len();
    if e.eta_y_f.len() != n || e.eta.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: e.eta_y_f.len(),
        });
    }
    let mut lambda = Vec::with_capacity(n);
    for i in 0..n {
        let l = dual.lambda[i];
        if l >= prior.c {
            return Err(Error::config(format!("lambda[{i}] = {l} is not below c = {}", prior.c)));
        }
        let mut gi = 1.0 - 1.0 / (prior.c - l) - e.eta_y_f[i];
        if form.margin_offset {
            gi += e.eta[i];
        }
        lambda.push(gi);
    }
    let mut mu = [0.0; 2];
    let mut kappa = [0.0; 2];
    for z in 0..2 {
        mu[z] = e.entropy_mass[z] - gamma_hat[z];
        kappa[z] = terms.coverage_target[z] - e.coverage_mass[z];
    }
    Ok(DualGradient { lambda, mu, kappa })
}

/// One projected ascent step in place; returns the largest absolute change.
/// With `constraints` false only `λ` moves.
pub fn psgd_step(dual: &mut DualState, grad: &DualGradient, cfg: &TrainConfig, constraints: bool) -> f64 {
    let mut delta: f64 = 0.0;
    for (l, g) in dual.lambda.iter_mut().zip(&grad.lambda) {
        let next = (*l + cfg.lr_lambda * g).clamp(0.0, cfg.c1);
        delta = delta.max((next - *l).abs());
        *l = next;
    }
    if constraints {
        for z in 0..2 {
            let mu = (dual.mu[z] + cfg.lr_mu * grad.mu[z]).max(0.0);
            let kappa = (dual.kappa[z] + cfg.lr_kappa * grad.kappa[z]).max(0.0);
            delta = delta.max((mu - dual.mu[z]).abs()).max((kappa - dual.kappa[z]).abs());
            dual.mu[z] = mu;
            dual.kappa[z] = kappa;
        }
    }
    delta
}

fn barrier(dual: &DualState, prior: &PriorConfig) -> f64 {
    dual.lambda.iter().map(|&l| l + (1.0 - l / prior.c).ln()).sum()
}

fn constraint_terms(dual: &DualState, terms: &LatentTerms, gamma_hat: &[f64; 2]) -> f64 {
    (0..2)
        .map(|z| -dual.mu[z] * gamma_hat[z] + dual.kappa[z] * terms.coverage_target[z])
        .sum()
}

/// Exact dual objective by enumeration (`N ≤ 12`).
pub fn dual_objective(
    g: &GramMatrix,
    dual: &DualState,
    prior: &PriorConfig,
    form: &PosteriorForm,
    terms: &LatentTerms,
    gamma_hat: &[f64; 2],
) -> Result<f64> {
    let ex = exact_posterior(g, dual, prior, form, terms)?;
    Ok(barrier(dual, prior) + constraint_terms(dual, terms, gamma_hat) - ex.log_partition)
}

/// Dual objective of plain MED (`η ≡ 1`): the log-partition is `½ (λ⊙y)ᵀ K (λ⊙y)`.
pub fn frozen_objective(g: &GramMatrix, dual: &DualState, prior: &PriorConfig, labels: &[Label]) -> Result<f64> {
    let b: Vec<f64> = dual.lambda.iter().zip(labels).map(|(l, z)| l * z.sign()).collect();
    Ok(barrier(dual, prior) - 0.5 * kernel::quadratic_form(g, &b)?)
}

/// Objective surrogate computed from sampled expectations; uses
/// `E[ln Z] ≈ ½ Σ λ_n E[η_n y_n f_n]` plus the constraint slacks.
fn estimated_objective(
    dual: &DualState,
    prior: &PriorConfig,
    e: &Expectations,
    terms: &LatentTerms,
    gamma_hat: &[f64; 2],
) -> f64 {
    let fit: f64 = dual.lambda.iter().zip(&e.eta_y_f).map(|(l, v)| l * v).sum();
    let mut slack = 0.0;
    for (z, g) in gamma_hat.iter().enumerate() {
        slack -= dual.mu[z] * (g - e.entropy_mass[z]);
        slack += dual.kappa[z] * (terms.coverage_target[z] - e.coverage_mass[z]);
    }
    barrier(dual, prior) - 0.5 * fit + slack
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub max_update: f64,
}

/// Output of the ascent loop on a fixed Gram matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualFit {
    pub dual: DualState,
    pub eta_hat: Vec<f64>,
    pub f_hat: Vec<f64>,
    pub history: Vec<IterRecord>,
    pub converged: bool,
}

/// Runs the ascent loop. Every iteration gets a fresh Gibbs stream drawn
/// from the master stream seeded by `cfg.seed`.
pub fn ascend(
    g: &GramMatrix,
    terms: &LatentTerms,
    gamma_hat: &[f64; 2],
    prior: &PriorConfig,
    cfg: &TrainConfig,
) -> Result<DualFit> {
    ascend_logged(g, terms, gamma_hat, prior, cfg, &mut |_| {})
}

/// [`ascend`] with a callback after every iteration.
pub fn ascend_logged(
    g: &GramMatrix,
    terms: &LatentTerms,
    gamma_hat: &[f64; 2],
    prior: &PriorConfig,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&IterRecord),
) -> Result<DualFit> {
    cfg.validate(prior)?;
    let n = g.len();
    if terms.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: terms.len(),
        });
    }
    let mut dual = DualState::init(n, cfg.c1);
    let mut master = rng::stream(cfg.seed, "trainer", &[]);
    let mut history = Vec::new();
    let mut converged = false;
    let mut last: Option<posterior::PosteriorEstimate> = None;
    let tail_len = (cfg.tail_average * cfg.max_iters as f64).floor() as usize;
    let mut tail = TailMean::new(n, cfg.max_iters - tail_len + 1);

    for it in 1..=cfg.max_iters {
        let (e, objective) = match cfg.mode {
            PosteriorMode::Gibbs => {
                let mut r = rng::Rng::seed_from_u64(master.next_u64());
                let est = gibbs_run(g, &dual, prior, &cfg.form, terms, &cfg.gibbs, &mut r)
                    .map_err(|err| at_iteration(err, it))?;
                let e = est.expectations.clone();
                let obj = estimated_objective(&dual, prior, &e, terms, gamma_hat);
                last = Some(est);
                (e, obj)
            }
            PosteriorMode::Exact => {
                let ex = exact_posterior(g, &dual, prior, &cfg.form, terms)?;
                let obj = barrier(&dual, prior) + constraint_terms(&dual, terms, gamma_hat) - ex.log_partition;
                (ex.expectations, obj)
            }
            PosteriorMode::Frozen => {
                let e = Expectations::frozen(g, &dual, terms)?;
                let obj = frozen_objective(g, &dual, prior, &terms.labels)?;
                (e, obj)
            }
        };
        tail.add(it, &dual, last.as_ref().filter(|_| cfg.mode == PosteriorMode::Gibbs));
        let grad = dual_gradients(&e, &dual, prior, &cfg.form, terms, gamma_hat)?;
        if !grad.is_finite() {
            return Err(Error::NonFinite {
                stage: "gradient",
                step: it,
            });
        }
        let constraints = cfg.mode != PosteriorMode::Frozen;
        let max_update = psgd_step(&mut dual, &grad, cfg, constraints);
        debug_assert!(dual.is_feasible(cfg.c1));
        let grad_norm = if constraints {
            grad.max_abs()
        } else {
            grad.lambda.iter().fold(0.0, |m: f64, v| m.max(v.abs()))
        };
        let record = IterRecord {
            iteration: it,
            objective,
            grad_norm,
            max_update,
        };
        log(&record);
        history.push(record);
        if max_update < cfg.tol {
            converged = true;
            break;
        }
    }

    let averaged = tail.count > 0;
    if averaged {
        dual = tail.dual.clone();
    }
    let (eta_hat, f_hat) = match cfg.mode {
        PosteriorMode::Gibbs if averaged => (tail.eta, tail.f),
        PosteriorMode::Gibbs => {
            let est = last.expect("at least one iteration ran");
            (est.eta_hat, est.f_hat)
        }
        PosteriorMode::Exact => {
            let ex = exact_posterior(g, &dual, prior, &cfg.form, terms)?;
            let f = posterior::f_mean(&dual, &ex.expectations.eta, &terms.labels, g)?;
            (ex.expectations.eta, f)
        }
        PosteriorMode::Frozen => {
            let ones = vec![1.0; n];
            let f = posterior::f_mean(&dual, &ones, &terms.labels, g)?;
            (ones, f)
        }
    };
    Ok(DualFit {
        dual,
        eta_hat,
        f_hat,
        history,
        converged,
    })
}

/// Running mean of the iterates from iteration `start` on.
struct TailMean {
    start: usize,
    count: usize,
    dual: DualState,
    eta: Vec<f64>,
    f: Vec<f64>,
}

impl TailMean {
    fn new(n: usize, start: usize) -> Self {
        TailMean {
            start,
            count: 0,
            dual: DualState::init(n, 0.0),
            eta: vec![0.0; n],
            f: vec![0.0; n],
        }
    }

    fn add(&mut self, it: usize, dual: &DualState, est: Option<&posterior::PosteriorEstimate>) {
        if it < self.start {
            return;
        }
        self.count += 1;
        let w = 1.0 / self.count as f64;
        let blend = |acc: &mut f64, v: f64| *acc += w * (v - *acc);
        for (a, &v) in self.dual.lambda.iter_mut().zip(&dual.lambda) {
            blend(a, v);
        }
        for z in 0..2 {
            blend(&mut self.dual.mu[z], dual.mu[z]);
            blend(&mut self.dual.kappa[z], dual.kappa[z]);
        }
        if let Some(est) = est {
            for (a, &v) in self.eta.iter_mut().zip(&est.eta_hat) {
                blend(a, v);
            }
            for (a, &v) in self.f.iter_mut().zip(&est.f_hat) {
                blend(a, v);
            }
        }
    }
}

fn at_iteration(err: Error, it: usize) -> Error {
    match err {
        Error::NonFinite { stage, .. } => Error::NonFinite { stage, step: it },
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub kernel: KernelSpec,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<Label>,
    pub dual: DualState,
    pub eta_hat: Vec<f64>,
    pub f_hat: Vec<f64>,
    /// `None` for plain MED.
    pub gem: Option<GemModel>,
    pub prior: PriorConfig,
    pub config: TrainConfig,
    pub history: Vec<IterRecord>,
    pub converged: bool,
}

impl TrainedModel {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{MODEL_HEADER}")?;
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w)?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut header = String::new();
        r.read_line(&mut header)?;
        let header = header.trim_end();
        if header != MODEL_HEADER {
            return Err(Error::Model(format!(
                "expected version line {MODEL_HEADER:?}, found {header:?}"
            )));
        }
        let model: TrainedModel = serde_json::from_reader(r)?;
        if model.features.len() != model.labels.len() || model.dual.lambda.len() != model.labels.len() {
            return Err(Error::Model("support, labels and duals differ in length".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::fs::File::open(path)?)
    }
}

/// Trains GEM-MED on `ds` with its fitted BP-kNN model. With
/// [`PosteriorMode::Frozen`] the GEM terms are ignored.
pub fn train(ds: &Dataset, spec: &KernelSpec, gem: &GemModel, prior: &PriorConfig, cfg: &TrainConfig) -> Result<TrainedModel> {
    train_logged(ds, spec, gem, prior, cfg, &mut |_| {})
}

pub fn train_logged(
    ds: &Dataset,
    spec: &KernelSpec,
    gem: &GemModel,
    prior: &PriorConfig,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&IterRecord),
) -> Result<TrainedModel> {
    if gem.labels.len() != ds.len() {
        return Err(Error::Dimension {
            expected: ds.len(),
            got: gem.labels.len(),
        });
    }
    if gem.labels != ds.labels() {
        return Err(Error::config("GEM model was fitted on a different dataset"));
    }
    let terms = LatentTerms::from_gem(gem, &cfg.form);
    fit_model(ds, spec, Some(gem), &terms, &gem.gamma_hat, prior, cfg, log)
}

/// Plain MED: `η ≡ 1`, `μ = κ = 0`, ascent on `λ` only.
pub fn train_med(ds: &Dataset, spec: &KernelSpec, prior: &PriorConfig, cfg: &TrainConfig) -> Result<TrainedModel> {
    train_med_logged(ds, spec, prior, cfg, &mut |_| {})
}

pub fn train_med_logged(
    ds: &Dataset,
    spec: &KernelSpec,
    prior: &PriorConfig,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&IterRecord),
) -> Result<TrainedModel> {
    let cfg = TrainConfig {
        mode: PosteriorMode::Frozen,
        ..*cfg
    };
    let n = ds.len();
    let terms = LatentTerms::new(ds.labels(), vec![0.0; n], vec![0.0; n], [0.0; 2])?;
    fit_model(ds, spec, None, &terms, &[0.0; 2], prior, &cfg, log)
}

#[allow(clippy::too_many_arguments)]
fn fit_model(
    ds: &Dataset,
    spec: &KernelSpec,
    gem: Option<&GemModel>,
    terms: &LatentTerms,
    gamma_hat: &[f64; 2],
    prior: &PriorConfig,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&IterRecord),
) -> Result<TrainedModel> {
    ds.require_both_classes()?;
    spec.validate()?;
    let g = kernel::gram(spec, ds)?;
    let fit = ascend_logged(&g, terms, gamma_hat, prior, cfg, log)?;
    Ok(TrainedModel {
        kernel: *spec,
        features: ds.samples().iter().map(|s| s.features.clone()).collect(),
        labels: ds.labels(),
        dual: fit.dual,
        eta_hat: fit.eta_hat,
        f_hat: fit.f_hat,
        gem: gem.cloned(),
        prior: *prior,
        config: *cfg,
        history: fit.history,
        converged: fit.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::bipartite_split;
    use crate::gem::{fit_gem, GemConfig};
    use nalgebra::DMatrix;
    use rand::Rng;

    fn zero_expectations(n: usize) -> Expectations {
        Expectations {
            eta_y_f: vec![0.0; n],
            eta: vec![0.0; n],
            entropy_mass: [0.0; 2],
            coverage_mass: [0.0; 2],
        }
    }

    fn terms(labels: Vec<Label>, h: Vec<f64>) -> LatentTerms {
        let counts = [
            labels.iter().filter(|&&z| z == Label::Neg).count(),
            labels.iter().filter(|&&z| z == Label::Pos).count(),
        ];
        let c = labels.iter().map(|z| 1.0 / counts[z.index()] as f64).collect();
        LatentTerms::new(labels, h, c, [0.8, 0.8]).unwrap()
    }

    #[test]
    fn gradient_at_zero_duals() {
        let t = terms(vec![Label::Pos, Label::Neg], vec![0.1, 0.2]);
        let d = DualState {
            lambda: vec![0.0; 2],
            mu: [0.0; 2],
            kappa: [0.0; 2],
        };
        let g = dual_gradients(&zero_expectations(2), &d, &PriorConfig::default(), &PosteriorForm::default(), &t, &[0.0; 2]).unwrap();
        for v in &g.lambda {
            assert!((v - 0.9).abs() < 1e-15);
        }
    }

    #[test]
    fn constraint_gradients_vanish_when_active() {
        let t = terms(vec![Label::Pos, Label::Neg], vec![0.1, 0.2]);
        let d = DualState::init(2, 1.0);
        let mut e = zero_expectations(2);
        e.entropy_mass = [0.3, 0.7];
        e.coverage_mass = [0.8, 0.8];
        let g = dual_gradients(&e, &d, &PriorConfig::default(), &PosteriorForm::default(), &t, &[0.3, 0.7]).unwrap();
        assert_eq!(g.mu, [0.0, 0.0]);
        assert_eq!(g.kappa, [0.0, 0.0]);
    }

    #[test]
    fn lambda_at_slack_rate_is_rejected() {
        let t = terms(vec![Label::Pos, Label::Neg], vec![0.0; 2]);
        let d = DualState {
            lambda: vec![10.0, 0.0],
            mu: [0.0; 2],
            kappa: [0.0; 2],
        };
        assert!(dual_gradients(&zero_expectations(2), &d, &PriorConfig::default(), &PosteriorForm::default(), &t, &[0.0; 2]).is_err());
    }

    #[test]
    fn projection_cases() {
        let cfg = TrainConfig::default();
        let mut d = DualState {
            lambda: vec![1.0, 0.5],
            mu: [0.0, 0.3],
            kappa: [0.0, 0.0],
        };
        let g = DualGradient {
            lambda: vec![5.0, 0.1],
            mu: [-4.0, 0.5],
            kappa: [-1.0, 0.2],
        };
        psgd_step(&mut d, &g, &cfg, true);
        assert_eq!(d.lambda[0], 1.0);
        assert_eq!(d.lambda[1], 0.5 + cfg.lr_lambda * 0.1);
        assert_eq!(d.mu[0], 0.0);
        assert_eq!(d.mu[1], 0.3 + cfg.lr_mu * 0.5);
        assert_eq!(d.kappa, [0.0, cfg.lr_kappa * 0.2]);
    }

    #[test]
    fn frozen_step_leaves_constraints() {
        let cfg = TrainConfig::default();
        let mut d = DualState::init(1, 1.0);
        let g = DualGradient {
            lambda: vec![0.0],
            mu: [1.0; 2],
            kappa: [1.0; 2],
        };
        assert_eq!(psgd_step(&mut d, &g, &cfg, false), 0.0);
        assert_eq!(d.mu, [0.0; 2]);
        assert_eq!(d.kappa, [0.0; 2]);
    }

    #[test]
    fn frozen_gradient_is_plain_med() {
        let mut r = rng::from_seed(11);
        for _ in 0..20 {
            let n = r.random_range(2..8);
            let mut vals = DMatrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
            vals = &vals * vals.transpose() + DMatrix::identity(n, n);
            let g = GramMatrix::from_values(vals).unwrap();
            let labels: Vec<Label> = (0..n).map(|i| if i % 2 == 0 { Label::Pos } else { Label::Neg }).collect();
            let t = LatentTerms::new(labels.clone(), vec![0.0; n], vec![0.0; n], [0.0; 2]).unwrap();
            let d = DualState {
                lambda: (0..n).map(|_| r.random_range(0.0..1.0)).collect(),
                mu: [0.0; 2],
                kappa: [0.0; 2],
            };
            let prior = PriorConfig::default();
            let e = Expectations::frozen(&g, &d, &t).unwrap();
            let grad = dual_gradients(&e, &d, &prior, &PosteriorForm::default(), &t, &[0.0; 2]).unwrap();
            for i in 0..n {
                let mut yf = 0.0;
                for (j, z) in labels.iter().enumerate() {
                    yf += g.get(i, j) * d.lambda[j] * z.sign();
                }
                yf *= labels[i].sign();
                let expected = 1.0 - yf - 1.0 / (prior.c - d.lambda[i]);
                assert!((grad.lambda[i] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn config_rejects_c1_at_or_above_c() {
        let cfg = TrainConfig { c1: 10.0, ..Default::default() };
        assert!(cfg.validate(&PriorConfig::default()).is_err());
        assert!(TrainConfig::default().validate(&PriorConfig::default()).is_ok());
    }

    fn two_points() -> Dataset {
        Dataset::from_parts(vec![vec![1.0, 0.0], vec![-1.0, 0.0]], vec![Label::Pos, Label::Neg]).unwrap()
    }

    #[test]
    fn separable_pair_exact() {
        let ds = two_points();
        let spec = KernelSpec::rbf(0.5);
        let g = kernel::gram(&spec, &ds).unwrap();
        let t = LatentTerms::new(ds.labels(), vec![0.0; 2], vec![1.0; 2], [0.95; 2]).unwrap();
        let cfg = TrainConfig {
            mode: PosteriorMode::Exact,
            tol: 1e-9,
            ..Default::default()
        };
        let fit = ascend(&g, &t, &[1.0; 2], &PriorConfig::default(), &cfg).unwrap();
        assert!(fit.eta_hat.iter().all(|&e| e >= 0.9), "{:?}", fit.eta_hat);
        for i in 0..2 {
            assert!(fit.f_hat[i] * ds.label(i).sign() > 0.0);
        }
    }

    #[test]
    fn exact_objective_never_decreases_for_small_steps() {
        let mut r = rng::from_seed(21);
        for _ in 0..5 {
            let n = r.random_range(2..=6);
            let pts: Vec<Vec<f64>> = (0..n).map(|_| vec![r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)]).collect();
            let mut labels: Vec<Label> = (0..n).map(|_| if r.random::<bool>() { Label::Pos } else { Label::Neg }).collect();
            labels[0] = Label::Pos;
            labels[1] = Label::Neg;
            let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
            let g = kernel::gram_from_points(&KernelSpec::rbf(0.7), &refs).unwrap();
            let t = terms(labels, (0..n).map(|_| r.random_range(0.0..1.0)).collect());
            let cfg = TrainConfig {
                mode: PosteriorMode::Exact,
                lr_lambda: 1e-3,
                lr_mu: 1e-3,
                lr_kappa: 1e-3,
                max_iters: 40,
                tol: 1e-12,
                ..Default::default()
            };
            let fit = ascend(&g, &t, &[0.2, 0.2], &PriorConfig::default(), &cfg).unwrap();
            for w in fit.history.windows(2) {
                assert!(w[1].objective >= w[0].objective - 1e-12, "{:?}", w);
            }
        }
    }

    #[test]
    fn tail_average_is_the_mean_of_final_iterates() {
        let ds = two_points();
        let spec = KernelSpec::rbf(0.5);
        let g = kernel::gram(&spec, &ds).unwrap();
        let t = LatentTerms::new(ds.labels(), vec![0.0; 2], vec![0.0; 2], [0.0; 2]).unwrap();
        let run = |iters: usize, tail: f64| {
            let cfg = TrainConfig {
                mode: PosteriorMode::Frozen,
                max_iters: iters,
                tol: 1e-15,
                tail_average: tail,
                lr_lambda: 0.05,
                ..Default::default()
            };
            ascend(&g, &t, &[0.0; 2], &PriorConfig::default(), &cfg).unwrap()
        };
        // iterations 3 and 4 average the duals reached after steps 2 and 3
        let avg = run(4, 0.5);
        let (a, b) = (run(2, 0.0), run(3, 0.0));
        for i in 0..2 {
            let want = 0.5 * (a.dual.lambda[i] + b.dual.lambda[i]);
            assert!((avg.dual.lambda[i] - want).abs() < 1e-15);
        }
        assert!(TrainConfig { tail_average: 1.0, ..Default::default() }.validate(&PriorConfig::default()).is_err());
    }

    #[test]
    fn med_returns_ones_and_keeps_constraints_at_zero() {
        let ds = two_points();
        let m = train_med(&ds, &KernelSpec::rbf(0.5), &PriorConfig::default(), &TrainConfig::default()).unwrap();
        assert!(m.eta_hat.iter().all(|&e| e == 1.0));
        assert_eq!(m.dual.mu, [0.0; 2]);
        assert_eq!(m.dual.kappa, [0.0; 2]);
        assert!(m.gem.is_none());
    }

    fn small_synthetic(seed: u64) -> (Dataset, GemModel) {
        let ds = crate::dataset::generate_synthetic(&crate::dataset::SyntheticConfig {
            n_per_class: 30,
            seed,
            ..Default::default()
        })
        .unwrap();
        let split = bipartite_split(&ds, 0.5, seed).unwrap();
        let gem = fit_gem(&ds, &split, &GemConfig::default()).unwrap();
        (ds, gem)
    }

    #[test]
    fn gibbs_training_is_deterministic() {
        let (ds, gem) = small_synthetic(4);
        let cfg = TrainConfig {
            max_iters: 5,
            gibbs: GibbsConfig {
                sweeps: 20,
                replicates: 5,
                ..Default::default()
            },
            seed: 9,
            ..Default::default()
        };
        let spec = KernelSpec::Linear { variance: 1e-2, bias: 0.0 };
        let a = train(&ds, &spec, &gem, &PriorConfig::default(), &cfg).unwrap();
        let b = train(&ds, &spec, &gem, &PriorConfig::default(), &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.eta_hat.iter().all(|&e| (0.0..=1.0).contains(&e)));
        assert!(a.dual.is_feasible(cfg.c1));
        assert_eq!(a.history.len(), 5);
    }

    #[test]
    fn model_file_round_trip() {
        let (ds, gem) = small_synthetic(5);
        let cfg = TrainConfig {
            max_iters: 3,
            gibbs: GibbsConfig {
                sweeps: 5,
                replicates: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        let m = train(&ds, &KernelSpec::rbf(0.1), &gem, &PriorConfig::default(), &cfg).unwrap();
        let mut buf = Vec::new();
        m.write(&mut buf).unwrap();
        assert!(buf.starts_with(b"gemmed-model v1\n"));
        let back = TrainedModel::read(buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn model_file_bad_header() {
        let err = TrainedModel::read("gemmed-model v2\n{}".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("gemmed-model v1"), "{err}");
    }

    #[test]
    fn gem_from_other_dataset_is_rejected() {
        let (ds, gem) = small_synthetic(6);
        let other = ds.with_labels_flipped();
        assert!(train(&other, &KernelSpec::rbf(0.1), &gem, &PriorConfig::default(), &TrainConfig::default()).is_err());
    }
}
