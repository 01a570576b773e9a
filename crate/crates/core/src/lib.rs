//! Multi-outcome synthetic control.
//!
//! Common-weight synthetic control estimators (separate, averaged,
//! concatenated and ν-combined objectives over the simplex), joint conformal
//! and permutation inference, pre-treatment diagnostics, a staged donor
//! screening pipeline, and a factor-model panel generator used as a
//! ground-truth oracle.
//!
//! The usual flow is [`panel::ingest_long`] → [`preprocess::fit_transform`]
//! → one of the `fit_*` functions in [`estimators`] →
//! [`estimators::predict_counterfactual`].

pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod optimize;
pub mod panel;
pub mod preprocess;
pub mod screening;
pub mod simgen;
mod stats;

pub use error::{Error, ErrorKind, Result};
pub use estimators::{
    EffectSeries, EstimatorKind, EstimatorSpec, FitResult, FitWeights, NuChoice,
};
pub use inference::{ConformalResult, PermutationResult};
pub use optimize::{SimplexQP, SolveOptions, WeightVector};
pub use panel::{LongRecord, OutcomeKind, OutcomeSpec, Panel};
pub use preprocess::{Design, PreprocessedPanel, SdKind, TransformParams};
pub use screening::{PipelineConfig, PipelineResult, ScreeningReport};
