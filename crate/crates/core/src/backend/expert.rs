//! Linear softmax experts trained by full-batch gradient descent on
//! cross-entropy. Original records carry their true label; emitted
//! counterfactual records carry the reversed label, so the same loss
//! rewards the original and penalizes accuracy on spurious-only views.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::features::{FeatureExtractor, TagTable};
use super::{softmax, Predictor};
use crate::error::{Error, Result};
use crate::types::{ClassSpace, ProbVector, SampleView};
use crate::util;

pub const EXPERT_SCHEMA: &str = "mmdebias/toy-expert";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertRole {
    /// General expert, originals only.
    Ge,
    /// Image-debias expert.
    Ide,
    /// Text-debias expert.
    Tde,
    /// Single model trained with every selected counterfactual.
    Mctd,
}

impl ExpertRole {
    pub const ALL: [ExpertRole; 4] = [
        ExpertRole::Ge,
        ExpertRole::Ide,
        ExpertRole::Tde,
        ExpertRole::Mctd,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown expert role `{s}`")))
    }
}

impl fmt::Display for ExpertRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExpertRole::Ge => "ge",
            ExpertRole::Ide => "ide",
            ExpertRole::Tde => "tde",
            ExpertRole::Mctd => "mctd",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 0.5,
            l2: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub features: Vec<(String, f64)>,
    pub target: usize,
    pub counterfactual: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ExpertFile {
    schema: String,
    role: ExpertRole,
    classes: ClassSpace,
    vocab: Vec<String>,
    /// K rows of `vocab.len() + 1` values; the last column is the bias.
    weights: Vec<Vec<f64>>,
    epochs: usize,
    seed: u64,
    examples: usize,
    counterfactuals: usize,
}

#[derive(Debug, Clone)]
pub struct ToyExpert {
    id: String,
    file: ExpertFile,
    index: BTreeMap<String, usize>,
    extractor: FeatureExtractor,
}

impl ToyExpert {
    fn from_file(file: ExpertFile, tags: Option<Arc<TagTable>>) -> Result<Self> {
        let k = file.classes.k();
        let d = file.vocab.len() + 1;
        if file.weights.len() != k || file.weights.iter().any(|r| r.len() != d) {
            return Err(Error::Shape(format!("expert weights must be {k}x{d}")));
        }
        let index = file
            .vocab
            .iter()
            .enumerate()
            .map(|(i, f)| (f.clone(), i))
            .collect();
        Ok(Self {
            id: format!("expert:{}:{}", file.role, util::fingerprint(&file)),
            file,
            index,
            extractor: FeatureExtractor::new(tags),
        })
    }

    pub fn role(&self) -> ExpertRole {
        self.file.role
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.file.weights
    }

    pub fn logits(&self, features: &[(String, f64)]) -> Vec<f64> {
        let bias = self.file.vocab.len();
        self.file
            .weights
            .iter()
            .map(|row| {
                row[bias]
                    + features
                        .iter()
                        .filter_map(|(f, x)| self.index.get(f).map(|&i| row[i] * x))
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn predict_features(&self, features: &[(String, f64)]) -> Result<ProbVector> {
        softmax(&self.logits(features))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::write_json(path, &self.file)
    }

    pub fn load(path: &Path, tags: Option<Arc<TagTable>>) -> Result<Self> {
        let file: ExpertFile = util::read_json(path)?;
        if file.schema != EXPERT_SCHEMA {
            return Err(Error::Schema {
                expected: EXPERT_SCHEMA.into(),
                found: file.schema,
            });
        }
        Self::from_file(file, tags)
    }
}

impl Predictor for ToyExpert {
    fn id(&self) -> &str {
        &self.id
    }

    fn class_space(&self) -> &ClassSpace {
        &self.file.classes
    }

    fn predict(&self, view: &SampleView<'_>) -> Result<ProbVector> {
        let feats = self.extractor.view_features(view)?;
        self.predict_features(&feats)
    }
}

/// Fits one expert. Zero epochs gives the uniform predictor.
pub fn train_toy_expert(
    role: ExpertRole,
    classes: &ClassSpace,
    examples: &[TrainingExample],
    cfg: &TrainConfig,
    tags: Option<Arc<TagTable>>,
) -> Result<ToyExpert> {
    let k = classes.k();
    if examples.is_empty() {
        return Err(Error::Data(format!(
            "no training records for the {role} expert"
        )));
    }
    if let Some(bad) = examples.iter().find(|e| e.target >= k) {
        return Err(Error::Data(format!("target {} outside 0..{k}", bad.target)));
    }
    let counterfactuals = examples.iter().filter(|e| e.counterfactual).count();
    if counterfactuals == 0 && matches!(role, ExpertRole::Ide | ExpertRole::Tde | ExpertRole::Mctd)
    {
        log::warn!(
            "the {role} expert has no counterfactual records; it reduces to the general expert"
        );
    }

    let vocab: Vec<String> = examples
        .iter()
        .flat_map(|e| e.features.iter().map(|(f, _)| f.clone()))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: BTreeMap<&str, usize> = vocab
        .iter()
        .enumerate()
        .map(|(i, f)| (f.as_str(), i))
        .collect();
    let rows: Vec<Vec<(usize, f64)>> = examples
        .iter()
        .map(|e| {
            e.features
                .iter()
                .map(|(f, x)| (index[f.as_str()], *x))
                .collect()
        })
        .collect();
    let d = vocab.len() + 1;
    let bias = vocab.len();
    let mut w = vec![vec![0.0; d]; k];
    let n = examples.len() as f64;

    for _ in 0..cfg.epochs {
        let mut grad = vec![vec![0.0; d]; k];
        for (x, e) in rows.iter().zip(examples) {
            let logits: Vec<f64> = w
                .iter()
                .map(|row| row[bias] + x.iter().map(|&(i, v)| row[i] * v).sum::<f64>())
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..k {
                let g = exps[c] / z - if c == e.target { 1.0 } else { 0.0 };
                for &(i, v) in x {
                    grad[c][i] += g * v;
                }
                grad[c][bias] += g;
            }
        }
        for c in 0..k {
            for j in 0..d {
                let reg = if j == bias { 0.0 } else { cfg.l2 * w[c][j] };
                w[c][j] -= cfg.learning_rate * (grad[c][j] / n + reg);
            }
        }
    }

    ToyExpert::from_file(
        ExpertFile {
            schema: EXPERT_SCHEMA.into(),
            role,
            classes: classes.clone(),
            vocab,
            weights: w,
            epochs: cfg.epochs,
            seed: cfg.seed,
            examples: examples.len(),
            counterfactuals,
        },
        tags,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(feats: &[&str], target: usize, cf: bool) -> TrainingExample {
        TrainingExample {
            features: feats.iter().map(|f| (f.to_string(), 1.0)).collect(),
            target,
            counterfactual: cf,
        }
    }

    fn classes() -> ClassSpace {
        ClassSpace::new(["a", "b"]).unwrap()
    }

    #[test]
    fn zero_epochs_is_uniform() {
        let e = train_toy_expert(
            ExpertRole::Ge,
            &classes(),
            &[ex(&["t:x"], 1, false)],
            &TrainConfig {
                epochs: 0,
                ..Default::default()
            },
            None,
        )
        .unwrap();
        assert_eq!(
            e.predict_features(&[("t:x".into(), 1.0)]).unwrap().scores(),
            &[0.5, 0.5]
        );
    }

    #[test]
    fn reversed_labels_suppress_the_shortcut() {
        // "s" co-occurs with class 1; the counterfactual pairs "s" alone with 0
        let mut data = vec![];
        for _ in 0..10 {
            data.push(ex(&["t:good", "i:s"], 1, false));
            data.push(ex(&["t:bad"], 0, false));
        }
        let ge = train_toy_expert(
            ExpertRole::Ge,
            &classes(),
            &data,
            &TrainConfig::default(),
            None,
        )
        .unwrap();
        let mut aug = data.clone();
        for _ in 0..10 {
            aug.push(ex(&["i:s"], 0, true));
        }
        let ide = train_toy_expert(
            ExpertRole::Ide,
            &classes(),
            &aug,
            &TrainConfig::default(),
            None,
        )
        .unwrap();
        let spur = [("i:s".to_string(), 1.0)];
        let ge_p = ge.predict_features(&spur).unwrap().scores()[1];
        let ide_p = ide.predict_features(&spur).unwrap().scores()[1];
        assert!(ide_p < ge_p, "{ide_p} vs {ge_p}");
        // both still get the originals right
        assert_eq!(
            ide.predict_features(&[("t:good".into(), 1.0), ("i:s".into(), 1.0)])
                .unwrap()
                .arg_top()
                .unwrap(),
            1
        );
    }

    #[test]
    fn deterministic_and_roundtrips() {
        let data = vec![ex(&["t:a"], 0, false), ex(&["t:b"], 1, false)];
        let a = train_toy_expert(
            ExpertRole::Ge,
            &classes(),
            &data,
            &TrainConfig::default(),
            None,
        )
        .unwrap();
        let b = train_toy_expert(
            ExpertRole::Ge,
            &classes(),
            &data,
            &TrainConfig::default(),
            None,
        )
        .unwrap();
        assert_eq!(a.weights(), b.weights());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.json");
        a.save(&p).unwrap();
        let back = ToyExpert::load(&p, None).unwrap();
        assert_eq!(back.weights(), a.weights());
        assert_eq!(back.id(), a.id());
    }

    #[test]
    fn role_names() {
        for r in ExpertRole::ALL {
            assert_eq!(ExpertRole::parse(&r.to_string()).unwrap(), r);
        }
    }
}
