//! Causal-mediation debiasing for multimodal classifiers.
//!
//! The crate builds counterfactual text and image views, reads scenario
//! outputs from a [`backend::Predictor`], corrects them with tunable
//! direct-effect weights, routes samples to debias experts and evaluates
//! the result. [`pipeline::Pipeline`] drives the file-backed stages used
//! by the command-line tool.

pub mod backend;
pub mod categorize;
pub mod cf_image;
pub mod cf_text;
pub mod datasets;
pub mod error;
pub mod mediation;
pub mod metrics;
pub mod pipeline;
pub mod router;
pub mod tuning;
pub mod types;
pub mod util;

pub use backend::{Predictor, Tracked};
pub use categorize::{categorize, DebiasCategory, DEFAULT_EPSILON};
pub use datasets::{DatasetManifest, Split, SyntheticSpec};
pub use error::{Error, Result};
pub use mediation::{
    mid_correct, moe_combine, mrid_correct, ExpertOutputs, ScenarioOutputs, WeightSet,
};
pub use metrics::{
    classification_report, f_beta, CallLedger, ClassificationReport, ConfusionMatrix, Metric,
};
pub use pipeline::{Method, Pipeline, Routing, RunConfig};
pub use types::{ClassSpace, CounterfactualAsset, ProbVector, Sample, SampleView, Variant};
pub use util::FileHeader;
