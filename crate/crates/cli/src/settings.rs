//! Flat `key = value` run settings shared by every command.
//!
//! Values come from the defaults, then an optional config file, then
//! command-line flags. Each command accepts a fixed set of keys; anything
//! else is rejected before work starts.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use gemmed::{
    EntropyNorm, GemConfig, GibbsConfig, GibbsScheme, KernelSpec, LogitForm, PosteriorForm, PosteriorMode,
    PriorConfig, SyntheticConfig, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Linear,
    Rbf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    GemMed,
    Med,
    GemPlusMed,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::GemMed, Method::Med, Method::GemPlusMed];

    pub fn name(self) -> &'static str {
        match self {
            Method::GemMed => "gem-med",
            Method::Med => "med",
            Method::GemPlusMed => "gem+med",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| anyhow!("unknown method `{s}` (expected gem-med, med or gem+med)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,

    pub n_per_class: usize,
    pub corruption_rate: f64,
    pub ring_radius: f64,
    pub ring_width: f64,

    pub kernel: KernelKind,
    pub gamma: f64,
    pub variance: f64,
    pub bias: f64,

    pub c: f64,
    /// `None` means `logit(beta_hat)`.
    pub a_eta: Option<f64>,

    pub c1: f64,
    pub lr_lambda: f64,
    pub lr_mu: f64,
    pub lr_kappa: f64,
    pub max_iters: usize,
    pub tail_average: f64,
    pub tol: f64,
    pub sweeps: usize,
    pub replicates: usize,
    pub scheme: GibbsScheme,
    pub posterior: PosteriorMode,
    pub baseline_med: bool,
    pub margin_offset: bool,
    pub kappa_scaled: bool,
    pub logit_form: LogitForm,

    pub k: usize,
    pub beta_hat: f64,
    pub epsilon: Option<f64>,
    pub split_fraction: f64,
    pub entropy_norm: EntropyNorm,

    pub alpha: f64,
    pub input: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub label_column: String,

    pub radii: Vec<f64>,
    pub rates: Vec<f64>,
    pub seeds: usize,
    pub test_per_class: usize,
    pub methods: Vec<Method>,
    pub screen_alpha: f64,
    pub timing: bool,

    pub gammas: Vec<f64>,
    pub folds: usize,
}

impl Default for Settings {
    fn default() -> Self {
        let synth = SyntheticConfig::default();
        let train = TrainConfig::default();
        let gem = GemConfig::default();
        Settings {
            seed: 0,
            threads: None,
            out: None,
            n_per_class: synth.n_per_class,
            corruption_rate: synth.corruption_rate,
            ring_radius: synth.ring_inner_radius,
            ring_width: synth.ring_width,
            kernel: KernelKind::Linear,
            gamma: 1.0,
            variance: DEFAULT_LINEAR_VARIANCE,
            bias: DEFAULT_LINEAR_BIAS,
            c: PriorConfig::default().c,
            a_eta: None,
            c1: train.c1,
            lr_lambda: train.lr_lambda,
            lr_mu: train.lr_mu,
            lr_kappa: train.lr_kappa,
            max_iters: train.max_iters,
            tail_average: train.tail_average,
            tol: train.tol,
            sweeps: train.gibbs.sweeps,
            replicates: train.gibbs.replicates,
            scheme: train.gibbs.scheme,
            posterior: PosteriorMode::Gibbs,
            baseline_med: false,
            margin_offset: train.form.margin_offset,
            kappa_scaled: train.form.kappa_scaled,
            logit_form: train.form.logit,
            k: gem.k,
            beta_hat: gem.beta_hat,
            epsilon: gem.epsilon,
            split_fraction: 0.5,
            entropy_norm: gem.norm,
            alpha: 0.05,
            input: None,
            model: None,
            label_column: "y".into(),
            radii: vec![15.0, 35.0, 55.0, 75.0],
            rates: vec![0.2, 0.3, 0.4, 0.5],
            seeds: 10,
            test_per_class: 2000,
            methods: Method::ALL.to_vec(),
            screen_alpha: 0.05,
            timing: false,
            gammas: vec![1e-3, 1e-2, 1e-1, 1.0, 10.0],
            folds: 5,
        }
    }
}

/// Linear kernel scale suited to the synthetic benchmark's coordinates.
pub const DEFAULT_LINEAR_VARIANCE: f64 = 1e-3;
pub const DEFAULT_LINEAR_BIAS: f64 = 0.15;

pub const GLOBAL_KEYS: &[&str] = &["seed", "threads", "out"];
pub const DATA_KEYS: &[&str] = &["n_per_class", "corruption_rate", "ring_radius", "ring_width"];
pub const KERNEL_KEYS: &[&str] = &["kernel", "gamma", "variance", "bias"];
pub const PRIOR_KEYS: &[&str] = &["c", "a_eta"];
pub const TRAIN_KEYS: &[&str] = &[
    "c1",
    "lr_lambda",
    "lr_mu",
    "lr_kappa",
    "max_iters",
    "tail_average",
    "tol",
    "sweeps",
    "replicates",
    "scheme",
    "posterior",
    "baseline",
    "margin_offset",
    "kappa_scaled",
    "logit_form",
];
pub const GEM_KEYS: &[&str] = &["k", "beta_hat", "epsilon", "split_fraction", "entropy_norm"];
pub const BENCH_KEYS: &[&str] = &["radii", "rates", "seeds", "test_per_class", "methods", "screen_alpha", "timing"];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("`{key}`: cannot parse `{value}`: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => bail!("`{key}`: expected true or false, got `{value}`"),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        bail!("`{key}`: list is empty");
    }
    Ok(items)
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: fmt::Display,
{
    if value == "auto" || value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

/// Normalizes `some-key` to `some_key`.
pub fn normalize_key(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl Settings {
    /// Applies one setting. `allowed` is the command's key set.
    pub fn set(&mut self, key: &str, value: &str, allowed: &[&str]) -> Result<()> {
        let key = normalize_key(key);
        let value = value.trim();
        if !allowed.contains(&key.as_str()) {
            bail!("unknown key `{key}` for this command");
        }
        match key.as_str() {
            "seed" => self.seed = parse(&key, value)?,
            "threads" => self.threads = Some(parse(&key, value)?),
            "out" => self.out = Some(PathBuf::from(value)),
            "n_per_class" => self.n_per_class = parse(&key, value)?,
            "corruption_rate" => self.corruption_rate = parse(&key, value)?,
            "ring_radius" => self.ring_radius = parse(&key, value)?,
            "ring_width" => self.ring_width = parse(&key, value)?,
            "kernel" => {
                self.kernel = match value {
                    "linear" => KernelKind::Linear,
                    "rbf" => KernelKind::Rbf,
                    _ => bail!("`kernel`: expected linear or rbf, got `{value}`"),
                }
            }
            "gamma" => self.gamma = parse(&key, value)?,
            "variance" => self.variance = parse(&key, value)?,
            "bias" => self.bias = parse(&key, value)?,
            "c" => self.c = parse(&key, value)?,
            "a_eta" => self.a_eta = optional(&key, value)?,
            "c1" => self.c1 = parse(&key, value)?,
            "lr_lambda" => self.lr_lambda = parse(&key, value)?,
            "lr_mu" => self.lr_mu = parse(&key, value)?,
            "lr_kappa" => self.lr_kappa = parse(&key, value)?,
            "max_iters" => self.max_iters = parse(&key, value)?,
            "tail_average" => self.tail_average = parse(&key, value)?,
            "tol" => self.tol = parse(&key, value)?,
            "sweeps" => self.sweeps = parse(&key, value)?,
            "replicates" => self.replicates = parse(&key, value)?,
            "scheme" => {
                self.scheme = match value {
                    "binary" => GibbsScheme::Binary,
                    "relaxed" => GibbsScheme::Relaxed,
                    _ => bail!("`scheme`: expected binary or relaxed, got `{value}`"),
                }
            }
            "posterior" => {
                self.posterior = match value {
                    "gibbs" => PosteriorMode::Gibbs,
                    "exact" => PosteriorMode::Exact,
                    _ => bail!("`posterior`: expected gibbs or exact, got `{value}`"),
                }
            }
            "baseline" => {
                self.baseline_med = match value {
                    "med" => true,
                    "none" => false,
                    _ => bail!("`baseline`: expected med or none, got `{value}`"),
                }
            }
            "margin_offset" => self.margin_offset = parse_bool(&key, value)?,
            "kappa_scaled" => self.kappa_scaled = parse_bool(&key, value)?,
            "logit_form" => {
                self.logit_form = match value {
                    "additive" => LogitForm::Additive,
                    "product" => LogitForm::Product,
                    _ => bail!("`logit_form`: expected additive or product, got `{value}`"),
                }
            }
            "k" => self.k = parse(&key, value)?,
            "beta_hat" => self.beta_hat = parse(&key, value)?,
            "epsilon" => self.epsilon = optional(&key, value)?,
            "split_fraction" => self.split_fraction = parse(&key, value)?,
            "entropy_norm" => {
                self.entropy_norm = match value {
                    "class" => EntropyNorm::ClassSize,
                    "training" => EntropyNorm::Training,
                    "raw" => EntropyNorm::Raw,
                    _ => bail!("`entropy_norm`: expected class, training or raw, got `{value}`"),
                }
            }
            "alpha" => self.alpha = parse(&key, value)?,
            "input" => self.input = Some(PathBuf::from(value)),
            "model" => self.model = Some(PathBuf::from(value)),
            "label_column" => self.label_column = value.to_string(),
            "radii" => self.radii = parse_list(&key, value)?,
            "rates" => self.rates = parse_list(&key, value)?,
            "seeds" => self.seeds = parse(&key, value)?,
            "test_per_class" => self.test_per_class = parse(&key, value)?,
            "methods" => self.methods = parse_list(&key, value)?,
            "screen_alpha" => self.screen_alpha = parse(&key, value)?,
            "timing" => self.timing = parse_bool(&key, value)?,
            "gammas" => self.gammas = parse_list(&key, value)?,
            "folds" => self.folds = parse(&key, value)?,
            _ => bail!("unknown key `{key}`"),
        }
        Ok(())
    }

    /// Defaults, then the config file, then flag overrides.
    pub fn resolve(config: Option<&Path>, overrides: &[(String, String)], allowed: &[&str]) -> Result<Settings> {
        let mut s = Settings::default();
        if let Some(path) = config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            for (line_no, (key, value)) in parse_config(&text)
                .with_context(|| format!("in config {}", path.display()))?
                .into_iter()
            {
                s.set(&key, &value, allowed)
                    .with_context(|| format!("{}:{line_no}", path.display()))?;
            }
        }
        for (key, value) in overrides {
            s.set(key, value, allowed).with_context(|| format!("flag --{}", key.replace('_', "-")))?;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic(0, self.ring_radius, self.corruption_rate).validate()?;
        self.kernel_spec().validate()?;
        self.gem_config().validate()?;
        let prior = self.prior();
        self.train_config().validate(&prior)?;
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            bail!("split_fraction must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.alpha) || !(0.0..1.0).contains(&self.screen_alpha) {
            bail!("alpha and screen_alpha must lie in [0, 1)");
        }
        if self.threads == Some(0) {
            bail!("threads must be positive");
        }
        if self.seeds == 0 || self.test_per_class == 0 {
            bail!("seeds and test_per_class must be positive");
        }
        if self.folds < 2 {
            bail!("folds must be at least 2");
        }
        if self.gammas.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            bail!("gammas must be positive");
        }
        let mut methods = self.methods.clone();
        methods.sort();
        methods.dedup();
        if methods.len() != self.methods.len() {
            bail!("methods contains duplicates");
        }
        for r in &self.radii {
            self.synthetic(0, *r, self.corruption_rate).validate()?;
        }
        for a in &self.rates {
            self.synthetic(0, self.ring_radius, *a).validate()?;
        }
        Ok(())
    }

    pub fn synthetic(&self, seed: u64, radius: f64, rate: f64) -> SyntheticConfig {
        SyntheticConfig {
            n_per_class: self.n_per_class,
            corruption_rate: rate,
            ring_inner_radius: radius,
            ring_width: self.ring_width,
            seed,
            ..Default::default()
        }
    }

    pub fn kernel_spec(&self) -> KernelSpec {
        match self.kernel {
            KernelKind::Linear => KernelSpec::Linear {
                variance: self.variance,
                bias: self.bias,
            },
            KernelKind::Rbf => KernelSpec::Rbf { gamma: self.gamma },
        }
    }

    pub fn prior(&self) -> PriorConfig {
        PriorConfig {
            c: self.c,
            a_eta: self
                .a_eta
                .unwrap_or_else(|| (self.beta_hat / (1.0 - self.beta_hat)).ln()),
        }
    }

    pub fn gem_config(&self) -> GemConfig {
        GemConfig {
            k: self.k,
            beta_hat: self.beta_hat,
            epsilon: self.epsilon,
            norm: self.entropy_norm,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            c1: self.c1,
            lr_lambda: self.lr_lambda,
            lr_mu: self.lr_mu,
            lr_kappa: self.lr_kappa,
            max_iters: self.max_iters,
            tol: self.tol,
            seed: self.seed,
            mode: if self.baseline_med {
                PosteriorMode::Frozen
            } else {
                self.posterior
            },
            gibbs: GibbsConfig {
                sweeps: self.sweeps,
                replicates: self.replicates,
                scheme: self.scheme,
            },
            form: PosteriorForm {
                logit: self.logit_form,
                margin_offset: self.margin_offset,
                kappa_scaled: self.kappa_scaled,
            },
            tail_average: self.tail_average,
        }
    }
}

/// Parses `key = value` lines; `#` starts a comment. Returns line numbers.
pub fn parse_config(text: &str) -> Result<Vec<(usize, (String, String))>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`", i + 1))?;
        let key = normalize_key(key);
        if key.is_empty() {
            bail!("line {}: empty key", i + 1);
        }
        out.push((i + 1, (key, value.trim().to_string())));
    }
    Ok(out)
}
