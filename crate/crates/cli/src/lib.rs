//! Command-line front end: data generation, training, prediction,
//! detection, cross-validation and the benchmark grid.

pub mod args;
pub mod benchmark;
pub mod commands;
pub mod settings;

use std::io::Write;

use anyhow::{bail, Result};

pub use args::{Cli, Command};
pub use settings::{Method, Settings};

use settings::{BENCH_KEYS, DATA_KEYS, GEM_KEYS, GLOBAL_KEYS, KERNEL_KEYS, PRIOR_KEYS, TRAIN_KEYS};

/// Keys each command accepts from config files and flags.
pub fn allowed_keys(command: &Command) -> Vec<&'static str> {
    let mut keys: Vec<&str> = GLOBAL_KEYS.to_vec();
    let groups: &[&[&str]] = match command {
        Command::Generate(_) => &[DATA_KEYS],
        Command::Train(_) => &[KERNEL_KEYS, PRIOR_KEYS, TRAIN_KEYS, GEM_KEYS, &["input", "label_column"]],
        Command::Predict(_) => &[&["model", "input", "label_column"]],
        Command::Detect(_) => &[&["model", "input", "alpha", "k", "label_column"]],
        Command::Benchmark(_) => &[
            &["n_per_class", "ring_width"],
            KERNEL_KEYS,
            PRIOR_KEYS,
            TRAIN_KEYS,
            GEM_KEYS,
            BENCH_KEYS,
        ],
        Command::CvGamma(_) => &[
            &["input", "label_column", "gammas", "folds"],
            PRIOR_KEYS,
            &["c1", "lr_lambda", "max_iters", "tol"],
        ],
    };
    for g in groups {
        keys.extend_from_slice(g);
    }
    keys
}

pub fn settings_for(cli: &Cli) -> Result<Settings> {
    Settings::resolve(cli.config.as_deref(), &cli.overrides(), &allowed_keys(&cli.command))
}

/// Runs one parsed invocation. Informational lines go to `report`.
pub fn run(cli: &Cli, report: &mut dyn Write) -> Result<()> {
    let s = settings_for(cli)?;
    match &cli.command {
        Command::Generate(_) => {
            let summary = commands::cmd_generate(&s)?;
            if s.out.is_some() {
                writeln!(report, "{summary}")?;
            } else {
                eprintln!("{summary}");
            }
        }
        Command::Train(_) => {
            let model = commands::cmd_train(&s, report)?;
            eprintln!(
                "trained on {} samples in {} iterations{}",
                model.len(),
                model.history.len(),
                if model.converged { " (converged)" } else { "" }
            );
        }
        Command::Predict(_) => {
            let n = commands::cmd_predict(&s)?;
            eprintln!("predicted {n} rows");
        }
        Command::Detect(_) => {
            let flagged = commands::cmd_detect(&s)?;
            eprintln!("flagged {flagged} rows at alpha = {}", s.alpha);
        }
        Command::Benchmark(_) => {
            let rows = benchmark::cmd_benchmark(&s)?;
            let failed = rows.iter().filter(|r| r.is_error()).count();
            if failed > 0 {
                bail!("{failed} of {} benchmark rows failed", rows.len());
            }
            eprintln!("benchmark finished: {} rows", rows.len());
        }
        Command::CvGamma(_) => {
            let gamma = commands::cmd_cv_gamma(&s)?;
            writeln!(report, "gamma={gamma}")?;
        }
    }
    Ok(())
}
