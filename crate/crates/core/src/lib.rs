//! Randomness and human-bias test battery for binary coin-flip sequences.
//!
//! The pipeline is: collect (or simulate) responses into
//! [`CollectionRecord`]s, parse them into flip sequences, cut overlapping
//! windows, and score every cell (model × prompt × temperature) against exact
//! fair-coin baselines and published human constants. Predictability is
//! measured by the held-out MSE of a LASSO next-flip predictor.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what reports use. Baseline pmfs are also
//! available as exact rationals.

pub mod baselines;
pub mod cli;
pub mod collector;
pub mod config;
pub mod generators;
pub mod predictor;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod selftest;
pub mod sequence;
pub mod stats;

pub use baselines::{exact_baseline, load_human_baselines, monte_carlo_baseline, BaselineTable, HumanBaselineRegistry};
pub use collector::{default_plan, run_sweep, CollectionRecord, EndpointConfig, PromptOrder, PromptSpec, SweepPlan};
pub use generators::{generate, GeneratorKind, GeneratorSpec};
pub use predictor::{cross_validated_mse, fit_lasso, gap_ratio, soft_threshold, CvConfig};

pub use report::{build_report, Report, ReportOptions};
pub use scalar::Scalar;
pub use sequence::{parse_response, windows, Flip, FlipSequence, ParseKind, ParseOutcome, Window};
pub use stats::CellKey;

pub type HeadsCountHistogram = stats::HeadsCountHistogram<f64>;
pub type AlternationHistogram = stats::AlternationHistogram<f64>;
pub type NGramTable = stats::NGramTable<f64>;
pub type CorrelationVector = stats::CorrelationVector<f64>;
pub type LassoModel = predictor::LassoModel<f64>;
pub type CvResult = predictor::CvResult<f64>;
pub type FeatureVector = predictor::FeatureVector<f64>;

/// Single-precision variants.
pub mod f32 {
    pub type HeadsCountHistogram = crate::stats::HeadsCountHistogram<f32>;
    pub type AlternationHistogram = crate::stats::AlternationHistogram<f32>;
    pub type NGramTable = crate::stats::NGramTable<f32>;
    pub type CorrelationVector = crate::stats::CorrelationVector<f32>;
    pub type LassoModel = crate::predictor::LassoModel<f32>;
    pub type CvResult = crate::predictor::CvResult<f32>;
}
