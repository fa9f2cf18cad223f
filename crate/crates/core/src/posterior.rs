//! The joint posterior over latent decision values `f` and nominality
//! indicators `η` at fixed dual variables.
//!
//! Given `η`, `f` is Gaussian with covariance `K` and mean
//! `K (λ ⊙ η ⊙ y)`. Given `f`, the `η_n` are independent Bernoulli
//! variables with logit
//!
//! ```text
//! a_η + λ_n (y_n f_n − o) − μ_{y_n} h_n + κ_{y_n} c_n
//! ```
//!
//! where `h_n` is the scaled nearest-neighbor score, `c_n` the coverage
//! weight and `o ∈ {0, 1}` the optional margin offset. Expectations are
//! estimated with a Gibbs sampler, or computed exactly by enumerating
//! `η ∈ {0,1}^N` for small `N`.

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::gem::GemModel;
use crate::kernel::{self, GramMatrix};
use crate::trainer::DualState;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Prior hyperparameters: slack rate `c` and the Bernoulli prior logit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub c: f64,
    pub a_eta: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            c: 10.0,
            a_eta: 4f64.ln(),
        }
    }
}

impl PriorConfig {
    /// `p₀(η_n = 1) = σ(a_η)`.
    pub fn prior_eta1(&self) -> f64 {
        sigmoid(self.a_eta)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::config("slack rate c must be positive"));
        }
        if !self.a_eta.is_finite() {
            return Err(Error::config("a_eta must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LogitForm {
    /// Prior log-odds plus the evidence terms (follows from the joint density).
    #[default]
    Additive,
    /// Evidence terms scaled by `log((1 − p₀)/p₀)`. Has no joint density;
    /// kept for comparison only and unsupported by [`exact_posterior`].
    Product,
}

/// Variants of the conditional for `η` given `f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PosteriorForm {
    pub logit: LogitForm,
    /// Subtract `λ_n` from the logit (margin target of 1 instead of 0).
    pub margin_offset: bool,
    /// Coverage weight `1/n_z` (true) or `1` (false) on `κ`.
    pub kappa_scaled: bool,
}

impl Default for PosteriorForm {
    fn default() -> Self {
        PosteriorForm {
            logit: LogitForm::Additive,
            margin_offset: false,
            kappa_scaled: true,
        }
    }
}

/// Per-sample data the latent posterior depends on besides the duals.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTerms {
    pub labels: Vec<Label>,
    /// Entropy-constraint weight `h_n`.
    pub entropy: Vec<f64>,
    /// Coverage-constraint weight `c_n`.
    pub coverage: Vec<f64>,
    /// Right-hand side of the coverage constraint per class.
    pub coverage_target: [f64; 2],
}

impl LatentTerms {
    pub fn new(labels: Vec<Label>, entropy: Vec<f64>, coverage: Vec<f64>, coverage_target: [f64; 2]) -> Result<Self> {
        let n = labels.len();
        if entropy.len() != n || coverage.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: if entropy.len() != n { entropy.len() } else { coverage.len() },
            });
        }
        Ok(LatentTerms {
            labels,
            entropy,
            coverage,
            coverage_target,
        })
    }

    pub fn from_gem(gem: &GemModel, form: &PosteriorForm) -> Self {
        let coverage = gem
            .labels
            .iter()
            .map(|z| {
                if form.kappa_scaled {
                    1.0 / gem.class_size[z.index()] as f64
                } else {
                    1.0
                }
            })
            .collect();
        let coverage_target = if form.kappa_scaled {
            [gem.beta_hat; 2]
        } else {
            [
                gem.beta_hat * gem.class_size[0] as f64,
                gem.beta_hat * gem.class_size[1] as f64,
            ]
        };
        LatentTerms {
            labels: gem.labels.clone(),
            entropy: gem.entropy_weights(),
            coverage,
            coverage_target,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    fn sign(&self, n: usize) -> f64 {
        self.labels[n].sign()
    }
}

/// The part of the logit that does not depend on `f`, and the scale that
/// multiplies the whole logit (1 for the additive form).
#[inline]
fn logit_parts(n: usize, dual: &DualState, prior: &PriorConfig, terms: &LatentTerms, form: &PosteriorForm) -> (f64, f64) {
    let z = terms.labels[n].index();
    let offset = if form.margin_offset { dual.lambda[n] } else { 0.0 };
    let evidence = -offset - dual.mu[z] * terms.entropy[n] + dual.kappa[z] * terms.coverage[n];
    match form.logit {
        LogitForm::Additive => (prior.a_eta + evidence, 1.0),
        LogitForm::Product => (evidence, -prior.a_eta),
    }
}

/// Log-odds of `η_n = 1` given `f_n`.
pub fn eta_logit(
    n: usize,
    f_n: f64,
    dual: &DualState,
    prior: &PriorConfig,
    terms: &LatentTerms,
    form: &PosteriorForm,
) -> f64 {
    let (base, scale) = logit_parts(n, dual, prior, terms, form);
    scale * (base + dual.lambda[n] * terms.sign(n) * f_n)
}

/// Conditional mean of `f` at the training points: `K (λ ⊙ η ⊙ y)`.
pub fn f_mean(dual: &DualState, eta: &[f64], labels: &[Label], g: &GramMatrix) -> Result<Vec<f64>> {
    let n = g.len();
    if eta.len() != n || labels.len() != n || dual.lambda.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: eta.len().min(labels.len()).min(dual.lambda.len()),
        });
    }
    let w: Vec<f64> = (0..n).map(|i| dual.lambda[i] * eta[i] * labels[i].sign()).collect();
    let mut out = vec![0.0; n];
    g.mul_into(&w, &mut out);
    Ok(out)
}

/// Posterior expectations consumed by the dual gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expectations {
    /// `E[η_n y_n f_n]`.
    pub eta_y_f: Vec<f64>,
    /// `E[η_n]`.
    pub eta: Vec<f64>,
    /// `E[Σ_{n: y_n = z} η_n h_n]`.
    pub entropy_mass: [f64; 2],
    /// `E[Σ_{n: y_n = z} η_n c_n]`.
    pub coverage_mass: [f64; 2],
}

impl Expectations {
    fn zeros(n: usize) -> Self {
        Expectations {
            eta_y_f: vec![0.0; n],
            eta: vec![0.0; n],
            entropy_mass: [0.0; 2],
            coverage_mass: [0.0; 2],
        }
    }

    /// Closed form when `η ≡ 1` is frozen: `f` is Gaussian with mean `K (λ ⊙ y)`.
    pub fn frozen(g: &GramMatrix, dual: &DualState, terms: &LatentTerms) -> Result<Self> {
        let ones = vec![1.0; terms.len()];
        let mean = f_mean(dual, &ones, &terms.labels, g)?;
        let mut e = Expectations::zeros(terms.len());
        for (n, m) in mean.iter().enumerate() {
            let z = terms.labels[n].index();
            e.eta[n] = 1.0;
            e.eta_y_f[n] = terms.sign(n) * m;
            e.entropy_mass[z] += terms.entropy[n];
            e.coverage_mass[z] += terms.coverage[n];
        }
        Ok(e)
    }
}

/// How the chain carries `η` from one sweep to the next.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GibbsScheme {
    /// One binary replicate is the chain state and expectations use the
    /// sampled `f_t`; a valid Gibbs kernel for the joint posterior.
    #[default]
    Binary,
    /// The replicate mean `η̂_t` drives the next GP mean and expectations
    /// use the mean `f̂_t`. Biased; kept for comparison.
    Relaxed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GibbsConfig {
    pub sweeps: usize,
    /// Bernoulli replicates `N_r` per sweep.
    pub replicates: usize,
    pub scheme: GibbsScheme,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        GibbsConfig {
            sweeps: 200,
            replicates: 50,
            scheme: GibbsScheme::Binary,
        }
    }
}

impl GibbsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sweeps == 0 || self.replicates == 0 {
            return Err(Error::config("sweeps and replicates must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorEstimate {
    /// Running mean over sweeps of the per-sweep replicate means.
    pub eta_hat: Vec<f64>,
    /// Replicate mean of the final sweep.
    pub eta_last: Vec<f64>,
    /// Running mean of the conditional GP mean at the training points.
    pub f_hat: Vec<f64>,
    pub sweeps: usize,
    pub inner_replicates: usize,
    pub expectations: Expectations,
}

/// `P(η_n = 1 | f)` for every sample.
pub fn eta_probabilities(
    f: &[f64],
    dual: &DualState,
    prior: &PriorConfig,
    terms: &LatentTerms,
    form: &PosteriorForm,
) -> Result<Vec<f64>> {
    if f.len() != terms.len() || dual.lambda.len() != terms.len() {
        return Err(Error::Dimension {
            expected: terms.len(),
            got: f.len().min(dual.lambda.len()),
        });
    }
    Ok((0..f.len())
        .map(|n| sigmoid(eta_logit(n, f[n], dual, prior, terms, form)))
        .collect())
}

/// One independent Bernoulli draw per entry of `prob`.
pub fn draw_eta<R: rand::Rng + ?Sized>(prob: &[f64], rng: &mut R, eta: &mut [bool]) {
    for (e, &p) in eta.iter_mut().zip(prob) {
        *e = rng.random::<f64>() < p;
    }
}

/// Gibbs estimate of the posterior expectations at fixed duals.
///
/// The chain starts from `η = 1`. Each sweep draws `f_t` from the GP,
/// then `N_r` independent Bernoulli replicates of `η` given `f_t`; every
/// expectation is averaged with `G_t = (t−1)/t · G_{t−1} + G(f_t, η̂_t)/t`.
#[allow(clippy::too_many_arguments)]
pub fn gibbs_run<R: rand::Rng + ?Sized>(
    g: &GramMatrix,
    dual: &DualState,
    prior: &PriorConfig,
    form: &PosteriorForm,
    terms: &LatentTerms,
    cfg: &GibbsConfig,
    rng: &mut R,
) -> Result<PosteriorEstimate> {
    cfg.validate()?;
    let n = g.len();
    if terms.len() != n || dual.lambda.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: terms.len().min(dual.lambda.len()),
        });
    }
    let signs: Vec<f64> = terms.labels.iter().map(|l| l.sign()).collect();
    let parts: Vec<(f64, f64)> = (0..n).map(|i| logit_parts(i, dual, prior, terms, form)).collect();

    let mut state = vec![1.0; n];
    let mut weights = vec![0.0; n];
    let mut mean = vec![0.0; n];
    let mut f = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut prob = vec![0.0; n];
    let mut counts = vec![0u32; n];
    let mut draw = vec![false; n];
    let mut eta_t = vec![0.0; n];

    let mut acc = Expectations::zeros(n);
    let mut eta_hat = vec![0.0; n];
    let mut f_hat = vec![0.0; n];
    let inv_r = 1.0 / cfg.replicates as f64;

    for t in 1..=cfg.sweeps {
        for i in 0..n {
            weights[i] = dual.lambda[i] * state[i] * signs[i];
        }
        g.mul_into(&weights, &mut mean);
        kernel::sample_gp_into(g, &mean, rng, &mut z, &mut f);

        for i in 0..n {
            let (base, scale) = parts[i];
            prob[i] = sigmoid(scale * (base + dual.lambda[i] * signs[i] * f[i]));
        }
        counts.iter_mut().for_each(|c| *c = 0);
        for _ in 0..cfg.replicates {
            draw_eta(&prob, rng, &mut draw);
            for i in 0..n {
                counts[i] += u32::from(draw[i]);
            }
        }
        if cfg.scheme == GibbsScheme::Binary {
            for i in 0..n {
                state[i] = if draw[i] { 1.0 } else { 0.0 };
            }
        }
        for i in 0..n {
            eta_t[i] = f64::from(counts[i]) * inv_r;
        }
        if cfg.scheme == GibbsScheme::Relaxed {
            state.copy_from_slice(&eta_t);
        }

        let evaluated = match cfg.scheme {
            GibbsScheme::Binary => &f,
            GibbsScheme::Relaxed => &mean,
        };
        let keep = (t - 1) as f64 / t as f64;
        let add = 1.0 / t as f64;
        let mut entropy_mass = [0.0; 2];
        let mut coverage_mass = [0.0; 2];
        for i in 0..n {
            let zc = terms.labels[i].index();
            acc.eta_y_f[i] = keep * acc.eta_y_f[i] + add * eta_t[i] * signs[i] * evaluated[i];
            acc.eta[i] = keep * acc.eta[i] + add * eta_t[i];
            entropy_mass[zc] += eta_t[i] * terms.entropy[i];
            coverage_mass[zc] += eta_t[i] * terms.coverage[i];
            eta_hat[i] = acc.eta[i];
            f_hat[i] = keep * f_hat[i] + add * mean[i];
        }
        for zc in 0..2 {
            acc.entropy_mass[zc] = keep * acc.entropy_mass[zc] + add * entropy_mass[zc];
            acc.coverage_mass[zc] = keep * acc.coverage_mass[zc] + add * coverage_mass[zc];
        }
        if f.iter().chain(&acc.eta_y_f).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                stage: "gibbs",
                step: t,
            });
        }
    }

    Ok(PosteriorEstimate {
        eta_hat,
        eta_last: eta_t,
        f_hat,
        sweeps: cfg.sweeps,
        inner_replicates: cfg.replicates,
        expectations: acc,
    })
}

/// Largest `N` accepted by [`exact_posterior`].
pub const EXACT_MAX_N: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct ExactPosterior {
    pub expectations: Expectations,
    /// `log Σ_η p₀(η) exp(½ Q(K, λ⊙η⊙y) + Σ_n η_n s_n)` with `s_n` the
    /// f-independent logit terms without the prior.
    pub log_partition: f64,
}

/// Exact expectations by enumerating every `η ∈ {0,1}^N`; `f` is
/// integrated out in closed form inside each configuration.
pub fn exact_posterior(
    g: &GramMatrix,
    dual: &DualState,
    prior: &PriorConfig,
    form: &PosteriorForm,
    terms: &LatentTerms,
) -> Result<ExactPosterior> {
    let n = g.len();
    if n > EXACT_MAX_N {
        return Err(Error::config(format!(
            "exact enumeration limited to N <= {EXACT_MAX_N}, got {n}"
        )));
    }
    if form.logit != LogitForm::Additive {
        return Err(Error::config("exact enumeration needs the additive logit form"));
    }
    if terms.len() != n || dual.lambda.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: terms.len().min(dual.lambda.len()),
        });
    }
    let p1 = prior.prior_eta1();
    let (log_p1, log_p0) = (p1.ln(), (1.0 - p1).ln());
    let signs: Vec<f64> = terms.labels.iter().map(|l| l.sign()).collect();
    // evidence term per sample, without the prior logit
    let s: Vec<f64> = (0..n)
        .map(|i| logit_parts(i, dual, prior, terms, form).0 - prior.a_eta)
        .collect();

    let configs = 1usize << n;
    let mut log_w = Vec::with_capacity(configs);
    let mut kb_all = Vec::with_capacity(configs);
    let mut b = vec![0.0; n];
    let mut kb = vec![0.0; n];
    for mask in 0..configs {
        let on = |i: usize| mask >> i & 1 == 1;
        let mut lw = 0.0;
        for i in 0..n {
            if on(i) {
                b[i] = dual.lambda[i] * signs[i];
                lw += log_p1 + s[i];
            } else {
                b[i] = 0.0;
                lw += log_p0;
            }
        }
        g.mul_into(&b, &mut kb);
        let q: f64 = b.iter().zip(&kb).map(|(x, y)| x * y).sum();
        log_w.push(lw + 0.5 * q);
        kb_all.push(kb.clone());
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    let mut e = Expectations::zeros(n);
    for (mask, (lw, kb)) in log_w.iter().zip(&kb_all).enumerate() {
        let w = (lw - max).exp();
        total += w;
        for i in 0..n {
            if mask >> i & 1 == 1 {
                let z = terms.labels[i].index();
                e.eta[i] += w;
                e.eta_y_f[i] += w * signs[i] * kb[i];
                e.entropy_mass[z] += w * terms.entropy[i];
                e.coverage_mass[z] += w * terms.coverage[i];
            }
        }
    }
    for v in e.eta.iter_mut().chain(e.eta_y_f.iter_mut()) {
        *v /= total;
    }
    for z in 0..2 {
        e.entropy_mass[z] /= total;
        e.coverage_mass[z] /= total;
    }
    Ok(ExactPosterior {
        expectations: e,
        log_partition: max + total.ln(),
    })
}
