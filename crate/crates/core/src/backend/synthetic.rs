//! Closed-form planted-bias classifier for generated datasets.
//!
//! `logit_k = ln prior_k + Σ_f x_f · w_f[k]` over the view's features.
//! Semantic features carry weight toward their class; spurious features
//! carry `bias_strength` toward the class they were planted for. A masked
//! modality contributes nothing, so a spurious-only view is scored by its
//! spurious (and neutral filler) features alone.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::features::{FeatureExtractor, TagTable};
use super::{softmax, Predictor};
use crate::error::{Error, Result};
use crate::types::{ClassSpace, ProbVector, SampleView};
use crate::util;

pub const MODEL_SCHEMA: &str = "mmdebias/synthetic-model";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticModelSpec {
    pub schema: String,
    pub classes: ClassSpace,
    pub priors: Vec<f64>,
    pub semantic_strength: f64,
    pub bias_strength: f64,
    pub seed: u64,
    /// Feature name → per-class weight.
    pub weights: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SyntheticModel {
    id: String,
    spec: SyntheticModelSpec,
    log_prior: Vec<f64>,
    extractor: FeatureExtractor,
}

impl SyntheticModel {
    pub fn new(spec: SyntheticModelSpec, tags: Option<Arc<TagTable>>) -> Result<Self> {
        let k = spec.classes.k();
        if spec.priors.len() != k || spec.priors.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::Config("priors must be K positive values".into()));
        }
        let total: f64 = spec.priors.iter().sum();
        if let Some((f, _)) = spec.weights.iter().find(|(_, w)| w.len() != k) {
            return Err(Error::Shape(format!(
                "feature `{f}` has the wrong number of weights"
            )));
        }
        let log_prior = spec.priors.iter().map(|p| (p / total).ln()).collect();
        Ok(Self {
            id: format!("synthetic:{}", util::fingerprint(&spec)),
            spec,
            log_prior,
            extractor: FeatureExtractor::new(tags),
        })
    }

    pub fn spec(&self) -> &SyntheticModelSpec {
        &self.spec
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    pub fn logits(&self, features: &[(String, f64)]) -> Vec<f64> {
        let mut out = self.log_prior.clone();
        for (name, x) in features {
            if let Some(w) = self.spec.weights.get(name) {
                for (o, wk) in out.iter_mut().zip(w) {
                    *o += x * wk;
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::write_json(path, &self.spec)
    }

    pub fn load(path: &Path, tags: Option<Arc<TagTable>>) -> Result<Self> {
        let spec: SyntheticModelSpec = util::read_json(path)?;
        if spec.schema != MODEL_SCHEMA {
            return Err(Error::Schema {
                expected: MODEL_SCHEMA.into(),
                found: spec.schema,
            });
        }
        Self::new(spec, tags)
    }
}

impl Predictor for SyntheticModel {
    fn id(&self) -> &str {
        &self.id
    }

    fn class_space(&self) -> &ClassSpace {
        &self.spec.classes
    }

    fn predict(&self, view: &SampleView<'_>) -> Result<ProbVector> {
        let feats = self.extractor.view_features(view)?;
        softmax(&self.logits(&feats))
    }
}
