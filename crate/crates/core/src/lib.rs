//! Robust kernel classification with latent nominality weights.
//!
//! A maximum-entropy large-margin classifier whose per-sample margin
//! constraints are reweighted by latent indicators `η_n`, with a
//! nearest-neighbor minimal-entropy set estimate steering which samples are
//! treated as nominal. Training is projected gradient ascent on the dual,
//! with expectations from a Gibbs sampler.

pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod gem;
pub mod kernel;
pub mod posterior;
pub mod rng;
pub mod trainer;

pub use dataset::{BipartiteSplit, Dataset, Label, Sample, SyntheticConfig};
pub use error::{Error, Result};
pub use evaluate::{EvalReport, PrPoint, TwoStage};
pub use gem::{EntropyNorm, GemConfig, GemModel, LooDetector, Verdict};
pub use kernel::{GramMatrix, KernelSpec};
pub use posterior::{
    Expectations, GibbsConfig, GibbsScheme, LatentTerms, LogitForm, PosteriorEstimate, PosteriorForm, PriorConfig,
};
pub use trainer::{DualState, IterRecord, PosteriorMode, TrainConfig, TrainedModel};
