//! Planted-shortcut generator.
//!
//! Each sample has a uniform label `y`. Both modalities carry
//! `semantic_dims` semantic tokens, each pointing at `y` with probability
//! `1 - semantic_noise`. With probability `cue_rate` a modality also
//! carries `spurious_dims` cue tokens of one class `z`, drawn so that
//! `P(z = y) = 1/K + ρ(1 - 1/K)` for ρ ≥ 0 and `(1 + ρ)/K` for ρ < 0.
//! Text tokens are `s<c>w<j>` (semantic), `#h<c>_<j>` (cue) and `f<j>`
//! (filler); image tags are `obj<c>_<j>`, `bg<c>_<j>` and `scene<j>`.
//!
//! Images are virtual: a tag table maps each image path to its tags and the
//! exact counterfactual image is the same tag list without semantic tags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{manifest_meta, write_assets, DatasetManifest, ManifestRecord, Split, MANIFEST_SCHEMA};
use crate::backend::synthetic::{SyntheticModelSpec, MODEL_SCHEMA};
use crate::backend::{SyntheticModel, TagTable};
use crate::cf_image::counterfactual_path;
use crate::cf_text::{apply_mask, SemanticAnnotation, DEFAULT_MASK_TOKEN};
use crate::error::{Error, Result};
use crate::types::{ClassSpace, CounterfactualAsset, Sample};
use crate::util::{self, FileHeader};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const TAGS_FILE: &str = "image_tags.jsonl";
pub const ASSETS_FILE: &str = "counterfactuals.jsonl";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const MODEL_FILE: &str = "model.json";
pub const SPEC_FILE: &str = "spec.json";
pub const ANNOTATION_SCHEMA: &str = "mmdebias/annotations";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    /// Semantic tokens per modality.
    pub semantic_dims: usize,
    /// Cue tokens per modality when a cue is present.
    pub spurious_dims: usize,
    pub semantic_vocab: usize,
    pub spurious_vocab: usize,
    pub fillers: usize,
    pub semantic_noise: f64,
    pub cue_rate: f64,
    pub rho_train: f64,
    /// Defaults to `rho_test`.
    pub rho_valid: Option<f64>,
    pub rho_test: f64,
    pub semantic_strength: f64,
    pub bias_strength: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 2,
            n_train: 2000,
            n_valid: 500,
            n_test: 500,
            semantic_dims: 2,
            spurious_dims: 1,
            semantic_vocab: 6,
            spurious_vocab: 2,
            fillers: 2,
            semantic_noise: 0.25,
            cue_rate: 0.8,
            rho_train: 0.8,
            rho_valid: None,
            rho_test: -0.8,
            semantic_strength: 1.0,
            bias_strength: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.n_train + self.n_valid + self.n_test == 0 {
            return bad("no samples requested".into());
        }
        for (name, rho) in [
            ("rho_train", self.rho_train),
            ("rho_valid", self.rho_valid()),
            ("rho_test", self.rho_test),
        ] {
            if !(-1.0..=1.0).contains(&rho) {
                return bad(format!("{name}={rho} outside [-1, 1]"));
            }
            if rho != 0.0 && (self.spurious_dims == 0 || self.cue_rate == 0.0) {
                return bad(format!("{name}={rho} needs spurious features to carry it"));
            }
        }
        if self.semantic_dims == 0 {
            return bad("semantic_dims must be at least 1".into());
        }
        if self.semantic_vocab == 0 || self.spurious_vocab == 0 {
            return bad("vocabularies must be non-empty".into());
        }
        if !(0.0..1.0).contains(&self.semantic_noise) {
            return bad(format!(
                "semantic_noise={} outside [0, 1)",
                self.semantic_noise
            ));
        }
        if !(0.0..=1.0).contains(&self.cue_rate) {
            return bad(format!("cue_rate={} outside [0, 1]", self.cue_rate));
        }
        if !self.semantic_strength.is_finite() || !self.bias_strength.is_finite() {
            return bad("model strengths must be finite".into());
        }
        Ok(())
    }

    pub fn rho_valid(&self) -> f64 {
        self.rho_valid.unwrap_or(self.rho_test)
    }

    fn rho(&self, split: Split) -> f64 {
        match split {
            Split::Train => self.rho_train,
            Split::Valid => self.rho_valid(),
            Split::Test => self.rho_test,
        }
    }

    /// `P(z = y)` for a cue under correlation `rho`.
    pub fn agreement(&self, rho: f64) -> f64 {
        let k = self.classes as f64;
        if rho >= 0.0 {
            1.0 / k + rho * (1.0 - 1.0 / k)
        } else {
            (1.0 + rho) / k
        }
    }

    /// Expected lift of a cue token for the class it was planted for.
    pub fn analytic_cue_lift(&self, rho: f64) -> f64 {
        self.classes as f64 * self.agreement(rho)
    }
}

/// A generated corpus held in memory; paths are relative to its directory.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub classes: ClassSpace,
    pub records: Vec<ManifestRecord>,
    pub tags: TagTable,
    pub assets: Vec<CounterfactualAsset>,
    pub annotations: Vec<SemanticAnnotation>,
    pub model: SyntheticModelSpec,
}

fn other_class(rng: &mut ChaCha8Rng, y: usize, k: usize) -> usize {
    let r = rng.random_range(0..k - 1);
    if r >= y {
        r + 1
    } else {
        r
    }
}

impl SyntheticCorpus {
    pub fn generate(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let k = spec.classes;
        let classes = ClassSpace::numbered(k)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut records = Vec::new();
        let mut tags = TagTable::default();
        let mut assets = Vec::new();
        let mut annotations = Vec::new();

        let sizes = [
            (Split::Train, spec.n_train),
            (Split::Valid, spec.n_valid),
            (Split::Test, spec.n_test),
        ];
        for (split, n) in sizes {
            let agree = spec.agreement(spec.rho(split));
            for i in 0..n {
                let id = format!("{split}-{i:05}");
                let y = rng.random_range(0..k);
                let semantic_class = |rng: &mut ChaCha8Rng| {
                    if rng.random::<f64>() < spec.semantic_noise {
                        other_class(rng, y, k)
                    } else {
                        y
                    }
                };
                let cue = |rng: &mut ChaCha8Rng| -> Option<usize> {
                    if spec.spurious_dims == 0 || rng.random::<f64>() >= spec.cue_rate {
                        return None;
                    }
                    Some(if rng.random::<f64>() < agree {
                        y
                    } else {
                        other_class(rng, y, k)
                    })
                };

                let mut semantic_words = Vec::new();
                for _ in 0..spec.semantic_dims {
                    let c = semantic_class(&mut rng);
                    semantic_words
                        .push(format!("s{c}w{}", rng.random_range(0..spec.semantic_vocab)));
                }
                let mut words = semantic_words.clone();
                if let Some(z) = cue(&mut rng) {
                    for _ in 0..spec.spurious_dims {
                        words.push(format!(
                            "#h{z}_{}",
                            rng.random_range(0..spec.spurious_vocab)
                        ));
                    }
                }
                for _ in 0..spec.fillers {
                    words.push(format!("f{}", rng.random_range(0..8)));
                }
                words.shuffle(&mut rng);
                let text = words.join(" ");

                let mut semantic_tags = Vec::new();
                for _ in 0..spec.semantic_dims {
                    let c = semantic_class(&mut rng);
                    semantic_tags.push(format!(
                        "obj{c}_{}",
                        rng.random_range(0..spec.semantic_vocab)
                    ));
                }
                let mut context_tags = vec![format!("scene{}", rng.random_range(0..4))];
                if let Some(z) = cue(&mut rng) {
                    for _ in 0..spec.spurious_dims {
                        context_tags.push(format!(
                            "bg{z}_{}",
                            rng.random_range(0..spec.spurious_vocab)
                        ));
                    }
                }
                let image = PathBuf::from(format!("images/{id}.png"));
                let cf_image = counterfactual_path(&image);
                let all_tags: Vec<String> =
                    semantic_tags.iter().chain(&context_tags).cloned().collect();
                let coverage = semantic_tags.len() as f64 / all_tags.len() as f64;
                tags.insert(image.to_string_lossy(), all_tags);
                tags.insert(cf_image.to_string_lossy(), context_tags);

                let ann = SemanticAnnotation::manual(&id, &semantic_words);
                let masked = apply_mask(&text, &ann, DEFAULT_MASK_TOKEN);
                assets.push(CounterfactualAsset {
                    sample_id: id.clone(),
                    spurious_text: Some(masked.text),
                    spurious_image: Some(cf_image),
                    text_unmasked: masked.spans.is_empty(),
                    mask_coverage: Some(coverage),
                });
                annotations.push(ann);
                records.push(ManifestRecord {
                    id,
                    text,
                    image_path: Some(image),
                    label: classes.label(y).map(str::to_string),
                    split: Some(split),
                });
            }
        }

        let mut weights = BTreeMap::new();
        for c in 0..k {
            let onehot = |s: f64| {
                (0..k)
                    .map(|j| if j == c { s } else { 0.0 })
                    .collect::<Vec<_>>()
            };
            for j in 0..spec.semantic_vocab {
                weights.insert(format!("t:s{c}w{j}"), onehot(spec.semantic_strength));
                weights.insert(format!("i:obj{c}_{j}"), onehot(spec.semantic_strength));
            }
            for j in 0..spec.spurious_vocab {
                weights.insert(format!("t:#h{c}_{j}"), onehot(spec.bias_strength));
                weights.insert(format!("i:bg{c}_{j}"), onehot(spec.bias_strength));
            }
        }
        let model = SyntheticModelSpec {
            schema: MODEL_SCHEMA.into(),
            classes: classes.clone(),
            priors: vec![1.0 / k as f64; k],
            semantic_strength: spec.semantic_strength,
            bias_strength: spec.bias_strength,
            seed: spec.seed,
            weights,
        };
        Ok(Self {
            spec: spec.clone(),
            classes,
            records,
            tags,
            assets,
            annotations,
            model,
        })
    }

    /// Samples of one split with paths relative to the corpus directory.
    pub fn samples(&self, split: Split) -> Vec<Sample> {
        self.records
            .iter()
            .filter(|r| r.split == Some(split))
            .map(|r| Sample {
                id: r.id.clone(),
                text: r.text.clone(),
                image_path: r.image_path.clone(),
                label: r.label.as_deref().and_then(|l| self.classes.index_of(l)),
            })
            .collect()
    }

    /// Writes every artifact into `dir` and returns the re-read manifest.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        let name = format!("synthetic-{}", util::fingerprint(&self.spec));
        let header = FileHeader::new(MANIFEST_SCHEMA, util::fingerprint(&self.spec))
            .with_meta(manifest_meta(&name, &self.classes, true));
        let manifest_path = dir.join(MANIFEST_FILE);
        util::write_jsonl(&manifest_path, &header, &self.records)?;
        self.tags.write(&dir.join(TAGS_FILE))?;
        write_assets(&dir.join(ASSETS_FILE), &self.assets)?;
        util::write_jsonl(
            &dir.join(ANNOTATIONS_FILE),
            &FileHeader::new(ANNOTATION_SCHEMA, util::fingerprint(&self.spec)),
            &self.annotations,
        )?;
        util::write_json(&dir.join(MODEL_FILE), &self.model)?;
        util::write_json(&dir.join(SPEC_FILE), &self.spec)?;
        DatasetManifest::ingest(&manifest_path)
    }
}

/// A generated dataset on disk, loaded back for use.
pub struct GeneratedDataset {
    pub manifest: DatasetManifest,
    pub assets: BTreeMap<String, CounterfactualAsset>,
    pub tags: Arc<TagTable>,
    pub model: SyntheticModel,
}

/// Generates, writes into `dir` and loads back the manifest, exact
/// counterfactual assets and the planted-bias model.
pub fn generate_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<GeneratedDataset> {
    let corpus = SyntheticCorpus::generate(spec)?;
    let manifest = corpus.write(dir)?;
    let tags = Arc::new(TagTable::load(&dir.join(TAGS_FILE))?);
    let assets = super::read_assets(&dir.join(ASSETS_FILE))?;
    let model = SyntheticModel::load(&dir.join(MODEL_FILE), Some(tags.clone()))?;
    Ok(GeneratedDataset {
        manifest,
        assets,
        tags,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{FeatureExtractor, Predictor};
    use crate::datasets::corpus_lift;
    use crate::types::SampleView;

    fn cue_lift(spec: &SyntheticSpec, split: Split) -> Vec<f64> {
        let corpus = SyntheticCorpus::generate(spec).unwrap();
        let samples = corpus.samples(split);
        let refs: Vec<&Sample> = samples.iter().collect();
        let ex = FeatureExtractor::new(Some(Arc::new(corpus.tags.clone())));
        let table = corpus_lift(&refs, spec.classes, &ex, 1).unwrap();
        let mut out = Vec::new();
        for c in 0..spec.classes {
            for j in 0..spec.spurious_vocab {
                for f in [format!("t:#h{c}_{j}"), format!("i:bg{c}_{j}")] {
                    out.push(table.get(&f, c).unwrap().lift);
                }
            }
        }
        out
    }

    #[test]
    fn uncorrelated_cues_have_unit_lift() {
        let spec = SyntheticSpec {
            rho_train: 0.0,
            rho_test: 0.0,
            ..Default::default()
        };
        for l in cue_lift(&spec, Split::Train) {
            assert!((l - 1.0).abs() <= 0.1, "{l}");
        }
    }

    #[test]
    fn correlated_cues_lift_above_one_and_a_half() {
        let spec = SyntheticSpec::default();
        assert!((spec.analytic_cue_lift(0.8) - 1.8).abs() < 1e-12);
        for l in cue_lift(&spec, Split::Train) {
            assert!(l > 1.5, "{l}");
        }
    }

    #[test]
    fn empirical_lift_converges() {
        let target = SyntheticSpec::default().analytic_cue_lift(0.8);
        let mut prev = f64::INFINITY;
        for n in [500, 2000, 8000] {
            let spec = SyntheticSpec {
                n_train: n,
                n_valid: 0,
                n_test: 0,
                ..Default::default()
            };
            let err = cue_lift(&spec, Split::Train)
                .iter()
                .map(|l| (l - target).abs())
                .sum::<f64>();
            assert!(err < prev * 1.25 || err < 0.05, "n={n}: {err} vs {prev}");
            prev = err;
        }
        assert!(prev / 8.0 < 0.05, "{prev}");
    }

    #[test]
    fn infeasible_specs() {
        for spec in [
            SyntheticSpec {
                rho_train: 1.5,
                ..Default::default()
            },
            SyntheticSpec {
                classes: 1,
                ..Default::default()
            },
            SyntheticSpec {
                spurious_dims: 0,
                ..Default::default()
            },
            SyntheticSpec {
                semantic_dims: 0,
                ..Default::default()
            },
        ] {
            assert!(matches!(
                SyntheticCorpus::generate(&spec),
                Err(Error::Spec(_))
            ));
        }
    }

    #[test]
    fn seeded_regeneration_is_byte_identical() {
        let spec = SyntheticSpec {
            n_train: 50,
            n_valid: 10,
            n_test: 10,
            ..Default::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        SyntheticCorpus::generate(&spec)
            .unwrap()
            .write(a.path())
            .unwrap();
        SyntheticCorpus::generate(&spec)
            .unwrap()
            .write(b.path())
            .unwrap();
        for f in [
            MANIFEST_FILE,
            TAGS_FILE,
            ASSETS_FILE,
            ANNOTATIONS_FILE,
            MODEL_FILE,
        ] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn counterfactuals_drop_exactly_the_semantic_evidence() {
        let spec = SyntheticSpec {
            n_train: 30,
            n_valid: 0,
            n_test: 0,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let g = generate_synthetic(&spec, dir.path()).unwrap();
        let ex = g.model.extractor();
        for s in &g.manifest.samples {
            let asset = &g.assets[&s.id];
            let view = SampleView::text_spurious(s, Some(asset)).unwrap();
            let f = ex.view_features(&view).unwrap();
            assert!(
                f.iter()
                    .all(|(n, _)| n.starts_with("t:#h") || n.starts_with("t:f")),
                "{f:?}"
            );
            let view = SampleView::image_spurious(s, Some(asset)).unwrap();
            let f = ex.view_features(&view).unwrap();
            assert!(
                f.iter()
                    .all(|(n, _)| n.starts_with("i:bg") || n.starts_with("i:scene")),
                "{f:?}"
            );
            assert!(g
                .model
                .predict(&SampleView::original(s))
                .unwrap()
                .is_normalized());
        }
    }
}
