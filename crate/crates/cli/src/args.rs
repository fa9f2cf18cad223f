use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "gemmed", version, about = "Robust kernel classification with joint anomaly detection")]
pub struct Cli {
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flat `key = value` settings file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output path.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for the benchmark pool.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic two-Gaussian dataset with ring anomalies.
    Generate(GenerateArgs),
    /// Fit a model and write it to --out.
    Train(TrainArgs),
    /// Classify the rows of an input CSV.
    Predict(PredictArgs),
    /// Flag anomalous rows of an input CSV.
    Detect(DetectArgs),
    /// Run the synthetic benchmark grid.
    Benchmark(BenchmarkArgs),
    /// Choose the RBF width by cross-validation.
    CvGamma(CvGammaArgs),
}

pub type Overrides = Vec<(String, String)>;

macro_rules! push_opts {
    ($out:expr, $self:ident, $($field:ident),* $(,)?) => {
        $(
            if let Some(v) = &$self.$field {
                $out.push((stringify!($field).to_string(), v.to_string()));
            }
        )*
    };
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    #[arg(long)]
    pub n_per_class: Option<usize>,
    #[arg(long)]
    pub corruption_rate: Option<f64>,
    #[arg(long)]
    pub ring_radius: Option<f64>,
    #[arg(long)]
    pub ring_width: Option<f64>,
}

impl DataArgs {
    fn push(&self, out: &mut Overrides) {
        push_opts!(out, self, n_per_class, corruption_rate, ring_radius, ring_width);
    }
}

#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    /// linear or rbf.
    #[arg(long)]
    pub kernel: Option<String>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub variance: Option<f64>,
    #[arg(long)]
    pub bias: Option<f64>,
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long)]
    pub a_eta: Option<String>,
    #[arg(long)]
    pub c1: Option<f64>,
    #[arg(long)]
    pub lr_lambda: Option<f64>,
    #[arg(long)]
    pub lr_mu: Option<f64>,
    #[arg(long)]
    pub lr_kappa: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Fraction of final iterations averaged into the solution.
    #[arg(long)]
    pub tail_average: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub sweeps: Option<usize>,
    #[arg(long)]
    pub replicates: Option<usize>,
    /// binary or relaxed.
    #[arg(long)]
    pub scheme: Option<String>,
    #[arg(long)]
    pub margin_offset: Option<bool>,
    #[arg(long)]
    pub kappa_scaled: Option<bool>,
    /// additive or product.
    #[arg(long)]
    pub logit_form: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub beta_hat: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<String>,
    #[arg(long)]
    pub split_fraction: Option<f64>,
    /// class, training or raw.
    #[arg(long)]
    pub entropy_norm: Option<String>,
}

impl ModelArgs {
    fn push(&self, out: &mut Overrides) {
        push_opts!(
            out,
            self,
            kernel,
            gamma,
            variance,
            bias,
            c,
            a_eta,
            c1,
            lr_lambda,
            lr_mu,
            lr_kappa,
            max_iters,
            tail_average,
            tol,
            sweeps,
            replicates,
            scheme,
            margin_offset,
            kappa_scaled,
            logit_form,
            k,
            beta_hat,
            epsilon,
            split_fraction,
            entropy_norm,
        );
    }
}

#[derive(Debug, Args, Default)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    /// Training CSV with feature columns, a label column and optionally `anomaly`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub label_column: Option<String>,
    /// `med` trains the plain baseline with η fixed at 1.
    #[arg(long)]
    pub baseline: Option<String>,
    /// gibbs or exact.
    #[arg(long)]
    pub posterior: Option<String>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args, Default)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct DetectArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Target false-alarm rate.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub label_column: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct BenchmarkArgs {
    /// Comma-separated ring radii.
    #[arg(long)]
    pub radii: Option<String>,
    /// Comma-separated corruption rates.
    #[arg(long)]
    pub rates: Option<String>,
    /// Replicates per grid cell.
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    /// Comma-separated subset of gem-med, med, gem+med.
    #[arg(long)]
    pub methods: Option<String>,
    /// False-alarm level of the screening stage of gem+med.
    #[arg(long)]
    pub screen_alpha: Option<f64>,
    /// Record wall time per row (makes the CSV run-dependent).
    #[arg(long)]
    pub timing: bool,
    #[arg(long)]
    pub n_per_class: Option<usize>,
    #[arg(long)]
    pub ring_width: Option<f64>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args, Default)]
pub struct CvGammaArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub label_column: Option<String>,
    /// Comma-separated candidate widths.
    #[arg(long)]
    pub gammas: Option<String>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long)]
    pub c1: Option<f64>,
    #[arg(long)]
    pub lr_lambda: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
}

fn path(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

impl Cli {
    /// Flag values as `(key, value)` settings, in application order.
    pub fn overrides(&self) -> Overrides {
        let mut out = Overrides::new();
        push_opts!(out, self, seed, threads);
        if let Some(p) = path(&self.out) {
            out.push(("out".into(), p));
        }
        match &self.command {
            Command::Generate(a) => a.data.push(&mut out),
            Command::Train(a) => {
                if let Some(p) = path(&a.input) {
                    out.push(("input".into(), p));
                }
                push_opts!(out, a, label_column, baseline, posterior);
                a.model.push(&mut out);
            }
            Command::Predict(a) => {
                for (key, p) in [("model", &a.model), ("input", &a.input)] {
                    if let Some(p) = path(p) {
                        out.push((key.into(), p));
                    }
                }
            }
            Command::Detect(a) => {
                for (key, p) in [("model", &a.model), ("input", &a.input)] {
                    if let Some(p) = path(p) {
                        out.push((key.into(), p));
                    }
                }
                push_opts!(out, a, alpha, k, label_column);
            }
            Command::Benchmark(a) => {
                push_opts!(out, a, radii, rates, seeds, test_per_class, methods, screen_alpha, n_per_class, ring_width);
                if a.timing {
                    out.push(("timing".into(), "true".into()));
                }
                a.model.push(&mut out);
            }
            Command::CvGamma(a) => {
                if let Some(p) = path(&a.input) {
                    out.push(("input".into(), p));
                }
                push_opts!(out, a, label_column, gammas, folds, c, c1, lr_lambda, max_iters, tol);
            }
        }
        out
    }
}
