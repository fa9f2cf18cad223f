//! Fixtures shared by the benchmarks.

use gemmed::dataset::{bipartite_split, generate_synthetic};
use gemmed::gem::{fit_gem, GemConfig};
use gemmed::{Dataset, GemModel, SyntheticConfig};

/// Default synthetic training set with `n` samples per class.
pub fn synthetic(n: usize, seed: u64) -> Dataset {
    generate_synthetic(&SyntheticConfig {
        n_per_class: n,
        seed,
        ..Default::default()
    })
    .expect("valid synthetic config")
}

pub fn fitted_gem(ds: &Dataset, seed: u64) -> GemModel {
    let split = bipartite_split(ds, 0.5, seed).expect("both classes present");
    fit_gem(ds, &split, &GemConfig::default()).expect("enough reference points")
}
