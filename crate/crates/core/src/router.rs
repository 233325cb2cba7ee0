//! Expert-strategy router: featurization, a standardized multinomial
//! logistic model over the four routable categories, checkpoint selection
//! by mean F-0.5 over the debiasing categories, and evaluation.
//!
//! Default feature layout for K classes (D = 5K + 3):
//! `p0 (K) | p_t (K) | p_i (K) | p0 − p_t (K) | p0 − p_i (K) |
//! ln(1 + words) | masked word share | image mask coverage`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::categorize::DebiasCategory;
use crate::cf_text::DEFAULT_MASK_TOKEN;
use crate::error::{Error, Result};
use crate::mediation::ScenarioOutputs;
use crate::metrics::{classification_report, f_beta, ClassificationReport, ConfusionMatrix};
use crate::util;

pub const ROUTER_SCHEMA: &str = "mmdebias/router";
pub const EMBEDDING_SCHEMA: &str = "mmdebias/embeddings";
const N_ROUTES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterFeatures {
    pub vector: Vec<f64>,
    pub schema_id: String,
}

/// Everything a featurizer may look at for one sample.
#[derive(Debug, Clone, Copy)]
pub struct RouterInput<'a> {
    pub sample_id: &'a str,
    pub scenario: Option<&'a ScenarioOutputs>,
    pub text: &'a str,
    pub spurious_text: Option<&'a str>,
    pub mask_coverage: Option<f64>,
}

pub trait Featurizer: Send + Sync {
    fn schema_id(&self) -> String;
    fn featurize(&self, input: &RouterInput<'_>) -> Result<RouterFeatures>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DefaultFeaturizer {
    pub k: usize,
}

impl DefaultFeaturizer {
    pub fn dim(&self) -> usize {
        5 * self.k + 3
    }
}

impl Featurizer for DefaultFeaturizer {
    fn schema_id(&self) -> String {
        format!("default/k{}/d{}", self.k, self.dim())
    }

    fn featurize(&self, input: &RouterInput<'_>) -> Result<RouterFeatures> {
        let s = input
            .scenario
            .ok_or_else(|| Error::Data(format!("no scenario outputs for `{}`", input.sample_id)))?;
        if s.p0.len() != self.k {
            return Err(Error::Shape(format!(
                "scenario outputs of length {} for K={}",
                s.p0.len(),
                self.k
            )));
        }
        let (p0, pt, pi) = (s.p0.scores(), s.p_t.scores(), s.p_i.scores());
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(p0);
        v.extend_from_slice(pt);
        v.extend_from_slice(pi);
        v.extend(p0.iter().zip(pt).map(|(a, b)| a - b));
        v.extend(p0.iter().zip(pi).map(|(a, b)| a - b));
        let words = input.text.split_whitespace().count();
        v.push((1.0 + words as f64).ln());
        let masked_share = input.spurious_text.map_or(0.0, |t| {
            let n = t.split_whitespace().count();
            let m = t.matches(DEFAULT_MASK_TOKEN).count();
            if n == 0 {
                0.0
            } else {
                m as f64 / n as f64
            }
        });
        v.push(masked_share);
        v.push(input.mask_coverage.unwrap_or(0.0));
        if let Some(x) = v.iter().find(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite router feature {x}")));
        }
        Ok(RouterFeatures {
            vector: v,
            schema_id: self.schema_id(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub sample_id: String,
    pub vector: Vec<f64>,
}

/// Externally computed per-sample embeddings.
#[derive(Debug, Clone)]
pub struct EmbeddingFeaturizer {
    name: String,
    dim: usize,
    table: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingFeaturizer {
    pub fn load(path: &Path) -> Result<Self> {
        let (header, recs): (_, Vec<EmbeddingRecord>) =
            util::read_jsonl_expect(path, EMBEDDING_SCHEMA)?;
        let dim = recs.first().map_or(0, |r| r.vector.len());
        if dim == 0 || recs.iter().any(|r| r.vector.len() != dim) {
            return Err(Error::Data(format!(
                "{}: embeddings must share one non-zero length",
                path.display()
            )));
        }
        Ok(Self {
            name: format!("embedding/{}/d{dim}", header.fingerprint),
            dim,
            table: recs.into_iter().map(|r| (r.sample_id, r.vector)).collect(),
        })
    }
}

impl Featurizer for EmbeddingFeaturizer {
    fn schema_id(&self) -> String {
        self.name.clone()
    }

    fn featurize(&self, input: &RouterInput<'_>) -> Result<RouterFeatures> {
        let v = self
            .table
            .get(input.sample_id)
            .ok_or_else(|| Error::Data(format!("no embedding for `{}`", input.sample_id)))?;
        debug_assert_eq!(v.len(), self.dim);
        Ok(RouterFeatures {
            vector: v.clone(),
            schema_id: self.schema_id(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouterConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    /// Inverse-frequency class weights in the loss.
    pub class_weighted: bool,
    /// Checkpoints are scored every this many epochs.
    pub eval_every: usize,
    /// Keep the best-scoring checkpoint rather than the last iterate.
    pub select_checkpoint: bool,
    pub seed: u64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            learning_rate: 0.5,
            l2: 1e-4,
            class_weighted: false,
            eval_every: 10,
            select_checkpoint: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterMetadata {
    pub epochs: usize,
    pub best_epoch: usize,
    pub seed: u64,
    /// Mean F-0.5 over categories 1–3 on the selection set.
    pub selection_score: f64,
    pub selected_on: String,
    pub degenerate: bool,
    pub train_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterModel {
    pub schema: String,
    pub feature_schema: String,
    /// 4 rows of D + 1 values over standardized features; last column is the bias.
    pub weights: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub metadata: RouterMetadata,
}

impl RouterModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Zero weights: every input routes to category 0.
    pub fn zeros(feature_schema: impl Into<String>, dim: usize) -> Self {
        Self {
            schema: ROUTER_SCHEMA.into(),
            feature_schema: feature_schema.into(),
            weights: vec![vec![0.0; dim + 1]; N_ROUTES],
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
            metadata: RouterMetadata {
                epochs: 0,
                best_epoch: 0,
                seed: 0,
                selection_score: 0.0,
                selected_on: String::new(),
                degenerate: false,
                train_size: 0,
            },
        }
    }

    pub fn scores(&self, f: &RouterFeatures) -> Result<Vec<f64>> {
        if f.schema_id != self.feature_schema {
            return Err(Error::Schema {
                expected: self.feature_schema.clone(),
                found: f.schema_id.clone(),
            });
        }
        if f.vector.len() != self.dim() {
            return Err(Error::Schema {
                expected: format!("{} features", self.dim()),
                found: format!("{} features", f.vector.len()),
            });
        }
        let z = standardize(&f.vector, &self.mean, &self.scale);
        Ok(logits(&self.weights, &z))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: RouterModel = util::read_json(path)?;
        if m.schema != ROUTER_SCHEMA {
            return Err(Error::Schema {
                expected: ROUTER_SCHEMA.into(),
                found: m.schema,
            });
        }
        if m.weights.len() != N_ROUTES
            || m.weights.iter().any(|r| r.len() != m.mean.len() + 1)
            || m.scale.len() != m.mean.len()
        {
            return Err(Error::Shape(format!(
                "{}: router weights do not match the feature width",
                path.display()
            )));
        }
        Ok(m)
    }
}

fn standardize(x: &[f64], mean: &[f64], scale: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(mean)
        .zip(scale)
        .map(|((x, m), s)| (x - m) / s)
        .collect()
}

fn logits(w: &[Vec<f64>], z: &[f64]) -> Vec<f64> {
    let d = z.len();
    w.iter()
        .map(|row| row[d] + row[..d].iter().zip(z).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// c* = argmax of the four class scores, lowest index on ties.
pub fn route(model: &RouterModel, f: &RouterFeatures) -> Result<DebiasCategory> {
    DebiasCategory::from_index(argmax(&model.scores(f)?))
}

/// Mean F-0.5 over categories 1–3.
pub fn debias_f05(cm: &ConfusionMatrix) -> Result<f64> {
    let r = classification_report(cm)?;
    Ok(r.per_class[1..]
        .iter()
        .map(|m| f_beta(m.precision, m.recall, 0.5))
        .sum::<f64>()
        / 3.0)
}

fn check_inputs(features: &[RouterFeatures], labels: &[usize]) -> Result<()> {
    if features.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} features for {} labels",
            features.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= N_ROUTES) {
        return Err(Error::Routing(format!("router label {l} outside 0..4")));
    }
    if let Some(f) = features.iter().find(|f| {
        f.schema_id != features[0].schema_id || f.vector.len() != features[0].vector.len()
    }) {
        return Err(Error::Schema {
            expected: features[0].schema_id.clone(),
            found: f.schema_id.clone(),
        });
    }
    Ok(())
}

/// Full-batch gradient descent on softmax cross-entropy from zero
/// weights. The checkpoint with the best mean F-0.5 over categories 1–3
/// on `valid` (or the training set when absent) is kept; earlier
/// checkpoints win ties.
pub fn train_router(
    features: &[RouterFeatures],
    labels: &[usize],
    valid: Option<(&[RouterFeatures], &[usize])>,
    cfg: &RouterConfig,
) -> Result<RouterModel> {
    if features.is_empty() {
        return Err(Error::Data("empty router training set".into()));
    }
    check_inputs(features, labels)?;
    let schema = features[0].schema_id.clone();
    let d = features[0].vector.len();
    let n = features.len();

    let mut mean = vec![0.0; d];
    for f in features {
        for (m, x) in mean.iter_mut().zip(&f.vector) {
            *m += x / n as f64;
        }
    }
    let mut scale = vec![0.0; d];
    for f in features {
        for ((s, x), m) in scale.iter_mut().zip(&f.vector).zip(&mean) {
            *s += (x - m).powi(2) / n as f64;
        }
    }
    for s in &mut scale {
        *s = if *s > 1e-12 { s.sqrt() } else { 1.0 };
    }

    let mut model = RouterModel::zeros(schema, d);
    model.mean = mean;
    model.scale = scale;
    model.metadata.epochs = cfg.epochs;
    model.metadata.seed = cfg.seed;
    model.metadata.train_size = n;

    let mut counts = [0usize; N_ROUTES];
    for &l in labels {
        counts[l] += 1;
    }
    let present: Vec<usize> = (0..N_ROUTES).filter(|&c| counts[c] > 0).collect();
    if present.len() == 1 {
        log::warn!(
            "router training set holds only category {}; the model always predicts it",
            present[0]
        );
        model.weights[present[0]][d] = 1.0;
        model.metadata.degenerate = true;
        return Ok(model);
    }

    let class_weight: Vec<f64> = (0..N_ROUTES)
        .map(|c| {
            if cfg.class_weighted && counts[c] > 0 {
                n as f64 / (present.len() * counts[c]) as f64
            } else {
                1.0
            }
        })
        .collect();
    let z: Vec<Vec<f64>> = features
        .iter()
        .map(|f| standardize(&f.vector, &model.mean, &model.scale))
        .collect();
    let (sel_x, sel_y, sel_name) = match valid {
        Some((vx, vy)) if !vx.is_empty() => {
            check_inputs(vx, vy)?;
            (vx, vy, "valid")
        }
        _ => (features, labels, "train"),
    };
    let select = |m: &RouterModel| -> Result<f64> {
        let preds = sel_x
            .iter()
            .map(|f| Ok(argmax(&m.scores(f)?)))
            .collect::<Result<Vec<_>>>()?;
        debias_f05(&ConfusionMatrix::from_predictions(N_ROUTES, sel_y, &preds)?)
    };

    let mut best = (select(&model)?, 0usize, model.weights.clone());
    let mut w = model.weights.clone();
    let every = cfg.eval_every.max(1);
    for epoch in 1..=cfg.epochs {
        let mut grad = vec![vec![0.0; d + 1]; N_ROUTES];
        for (x, &y) in z.iter().zip(labels) {
            let l = logits(&w, x);
            let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = l.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = e.iter().sum();
            for c in 0..N_ROUTES {
                let g = class_weight[y] * (e[c] / sum - if c == y { 1.0 } else { 0.0 });
                for j in 0..d {
                    grad[c][j] += g * x[j];
                }
                grad[c][d] += g;
            }
        }
        for c in 0..N_ROUTES {
            for j in 0..=d {
                let reg = if j == d { 0.0 } else { cfg.l2 * w[c][j] };
                w[c][j] -= cfg.learning_rate * (grad[c][j] / n as f64 + reg);
            }
        }
        if epoch % every == 0 || epoch == cfg.epochs {
            model.weights = w.clone();
            let score = select(&model)?;
            if score > best.0 {
                best = (score, epoch, w.clone());
            }
        }
    }
    if !cfg.select_checkpoint {
        model.weights = w;
        best = (select(&model)?, cfg.epochs, model.weights.clone());
    }
    model.weights = best.2;
    model.metadata.best_epoch = best.1;
    model.metadata.selection_score = best.0;
    model.metadata.selected_on = sel_name.into();
    Ok(model)
}

/// Mean softmax cross-entropy of a model on a labelled set.
pub fn router_loss(
    model: &RouterModel,
    features: &[RouterFeatures],
    labels: &[usize],
) -> Result<f64> {
    check_inputs(features, labels)?;
    let mut total = 0.0;
    for (f, &y) in features.iter().zip(labels) {
        let l = model.scores(f)?;
        let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + l.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - l[y];
    }
    Ok(total / features.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterEvaluation {
    pub confusion: ConfusionMatrix,
    pub report: ClassificationReport,
    pub f05: Vec<f64>,
    pub mean_debias_f05: f64,
}

pub fn evaluation_from_confusion(cm: ConfusionMatrix) -> Result<RouterEvaluation> {
    let report = classification_report(&cm)?;
    let f05: Vec<f64> = report
        .per_class
        .iter()
        .map(|m| f_beta(m.precision, m.recall, 0.5))
        .collect();
    let mean_debias_f05 = f05[1..].iter().sum::<f64>() / (f05.len() - 1) as f64;
    Ok(RouterEvaluation {
        confusion: cm,
        report,
        f05,
        mean_debias_f05,
    })
}

pub fn evaluate_router(
    model: &RouterModel,
    features: &[RouterFeatures],
    truths: &[DebiasCategory],
) -> Result<RouterEvaluation> {
    if features.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let t: Vec<usize> = truths
        .iter()
        .map(|c| {
            c.index()
                .ok_or_else(|| Error::Routing("excluded samples cannot be routed".into()))
        })
        .collect::<Result<_>>()?;
    let p: Vec<usize> = features
        .iter()
        .map(|f| Ok(argmax(&model.scores(f)?)))
        .collect::<Result<_>>()?;
    evaluation_from_confusion(ConfusionMatrix::from_predictions(N_ROUTES, &t, &p)?)
}
