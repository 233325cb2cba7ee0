//! Dataset manifests, counterfactual asset files, reversed labels,
//! training-set emission and the planted-bias generator.
//!
//! Manifests are line-per-record files: an optional header whose `meta`
//! carries `name`, `classes` and `virtual_images`, then one
//! `{id, text, image_path, label, split}` object per line. Relative paths
//! resolve against the manifest's directory.

mod emit;
mod synthetic;

pub use emit::{
    emit_training_sets, read_emitted, write_emitted, EmitRole, EmittedRecord, EmittedSet,
    EmittedTrainingSets, ViewDescriptor, EMITTED_SCHEMA,
};
pub use synthetic::{
    generate_synthetic, GeneratedDataset, SyntheticCorpus, SyntheticSpec, ANNOTATIONS_FILE,
    ASSETS_FILE, MANIFEST_FILE, MODEL_FILE, SPEC_FILE, TAGS_FILE,
};

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backend::FeatureExtractor;
use crate::cf_text::{parse_extractor_response, SemanticAnnotation};
use crate::error::{Error, Result};
use crate::metrics::LiftTable;
use crate::types::{ClassSpace, CounterfactualAsset, ProbVector, Sample};
use crate::util::{self, FileHeader};

pub const MANIFEST_SCHEMA: &str = "mmdebias/manifest";
pub const ASSETS_SCHEMA: &str = "mmdebias/counterfactuals";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

/// One manifest line as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub image_path: Option<PathBuf>,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct ManifestMeta {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    classes: Option<Vec<String>>,
    /// Images exist only as entries of a tag table.
    #[serde(default)]
    virtual_images: bool,
    #[serde(default)]
    notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub classes: ClassSpace,
    pub samples: Vec<Sample>,
    /// Parallel to `samples`; records without a split are training data.
    pub splits: Vec<Split>,
    pub notes: Vec<String>,
    pub virtual_images: bool,
    /// Ids whose image file was missing at ingest; their image modality is absent.
    pub missing_images: Vec<String>,
    pub source: Option<PathBuf>,
}

impl DatasetManifest {
    /// Reads and validates a manifest. Class order comes from the header,
    /// or from first appearance of each label when there is none.
    pub fn ingest(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().unwrap_or_else(|| Path::new(""));
        let mut meta = ManifestMeta::default();
        let mut rows: Vec<(usize, ManifestRecord)> = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            if idx == 0 {
                if let Ok(h) = serde_json::from_str::<FileHeader>(&line) {
                    if h.schema != MANIFEST_SCHEMA {
                        return Err(Error::Schema {
                            expected: MANIFEST_SCHEMA.into(),
                            found: h.schema,
                        });
                    }
                    if !h.meta.is_null() {
                        meta = serde_json::from_value(h.meta)?;
                    }
                    continue;
                }
            }
            let rec: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), idx + 1)))?;
            rows.push((idx + 1, rec));
        }

        let classes = match meta.classes {
            Some(labels) => ClassSpace::new(labels)?,
            None => {
                let mut seen = Vec::<String>::new();
                for (_, r) in &rows {
                    if let Some(l) = &r.label {
                        if !seen.contains(l) {
                            seen.push(l.clone());
                        }
                    }
                }
                ClassSpace::new(seen).map_err(|e| {
                    Error::Data(format!("{}: cannot infer classes: {e}", path.display()))
                })?
            }
        };

        let mut ids = HashSet::new();
        let mut samples = Vec::with_capacity(rows.len());
        let mut splits = Vec::with_capacity(rows.len());
        let mut missing_images = Vec::new();
        for (line, rec) in rows {
            if !ids.insert(rec.id.clone()) {
                return Err(Error::Data(format!(
                    "{}:{line}: duplicated id `{}`",
                    path.display(),
                    rec.id
                )));
            }
            let label = match &rec.label {
                Some(l) => Some(classes.index_of(l).ok_or_else(|| {
                    Error::Data(format!("{}:{line}: unknown label `{l}`", path.display()))
                })?),
                None => None,
            };
            let mut image = rec
                .image_path
                .map(|p| if p.is_relative() { dir.join(p) } else { p });
            if let Some(p) = &image {
                if !meta.virtual_images && !p.exists() {
                    log::warn!(
                        "{}:{line}: image {} not found; treating as text-only",
                        path.display(),
                        p.display()
                    );
                    missing_images.push(rec.id.clone());
                    image = None;
                }
            }
            let sample = Sample::new(rec.id, rec.text, image, label)
                .map_err(|e| Error::Data(format!("{}:{line}: {e}", path.display())))?;
            samples.push(sample);
            splits.push(rec.split.unwrap_or(Split::Train));
        }

        let manifest = Self {
            name: meta.name.unwrap_or_else(|| {
                path.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            }),
            classes,
            samples,
            splits,
            notes: meta.notes,
            virtual_images: meta.virtual_images,
            missing_images,
            source: Some(path.to_path_buf()),
        };
        for split in Split::ALL {
            let counts = manifest.class_counts(Some(split));
            if counts.values().any(|&n| n > 0) {
                log::info!("{}: {split} {:?}", manifest.name, counts);
            }
        }
        Ok(manifest)
    }

    /// Writes the manifest; image paths are stored as given.
    pub fn write(&self, path: &Path) -> Result<()> {
        let records: Vec<ManifestRecord> = self
            .samples
            .iter()
            .zip(&self.splits)
            .map(|(s, split)| ManifestRecord {
                id: s.id.clone(),
                text: s.text.clone(),
                image_path: s.image_path.clone(),
                label: s
                    .label
                    .and_then(|l| self.classes.label(l))
                    .map(str::to_string),
                split: Some(*split),
            })
            .collect();
        let meta = ManifestMeta {
            name: Some(self.name.clone()),
            classes: Some(self.classes.labels().to_vec()),
            virtual_images: self.virtual_images,
            notes: self.notes.clone(),
        };
        let header = FileHeader::new(MANIFEST_SCHEMA, util::fingerprint(&records))
            .with_meta(serde_json::to_value(meta)?);
        util::write_jsonl(path, &header, &records)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split_samples(&self, split: Split) -> Vec<&Sample> {
        self.samples
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .map(|(x, _)| x)
            .collect()
    }

    /// Labelled-sample counts per class name, optionally for one split.
    pub fn class_counts(&self, split: Option<Split>) -> BTreeMap<String, usize> {
        let mut out: BTreeMap<String, usize> = self
            .classes
            .labels()
            .iter()
            .map(|l| (l.clone(), 0))
            .collect();
        for (s, sp) in self.samples.iter().zip(&self.splits) {
            if split.is_some_and(|want| want != *sp) {
                continue;
            }
            if let Some(l) = s.label.and_then(|l| self.classes.label(l)) {
                *out.entry(l.to_string()).or_default() += 1;
            }
        }
        out
    }

    /// Directory the manifest was read from, used to locate sibling files.
    pub fn dir(&self) -> PathBuf {
        self.source
            .as_deref()
            .and_then(Path::parent)
            .map(Path::to_path_buf)
            .unwrap_or_default()
    }
}

/// Reads counterfactual assets keyed by sample id. Relative image paths
/// resolve against the file's directory.
pub fn read_assets(path: &Path) -> Result<BTreeMap<String, CounterfactualAsset>> {
    let (_, recs): (_, Vec<CounterfactualAsset>) = util::read_jsonl_expect(path, ASSETS_SCHEMA)?;
    let dir = path.parent().unwrap_or_else(|| Path::new(""));
    let mut out = BTreeMap::new();
    for mut a in recs {
        if let Some(p) = &a.spurious_image {
            if p.is_relative() {
                a.spurious_image = Some(dir.join(p));
            }
        }
        if out.insert(a.sample_id.clone(), a).is_some() {
            return Err(Error::Data(format!(
                "{}: duplicated asset id",
                path.display()
            )));
        }
    }
    Ok(out)
}

pub fn write_assets<'a>(
    path: &Path,
    assets: impl IntoIterator<Item = &'a CounterfactualAsset>,
) -> Result<()> {
    let recs: Vec<&CounterfactualAsset> = assets.into_iter().collect();
    util::write_jsonl(
        path,
        &FileHeader::new(ASSETS_SCHEMA, util::fingerprint(&recs)),
        &recs,
    )
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AnnotationLine {
    Annotation(SemanticAnnotation),
    Response { sample_id: String, response: String },
}

/// Semantic annotations keyed by sample id. Lines are either stored
/// annotations or raw extractor responses (`{"sample_id", "response"}`).
pub fn read_annotations(path: &Path) -> Result<BTreeMap<String, SemanticAnnotation>> {
    let (_, lines): (_, Vec<AnnotationLine>) = util::read_jsonl(path)?;
    let mut out = BTreeMap::new();
    for line in lines {
        let ann = match line {
            AnnotationLine::Annotation(a) => a,
            AnnotationLine::Response {
                sample_id,
                response,
            } => parse_extractor_response(&response)
                .map_err(|e| Error::Data(format!("{}: sample `{sample_id}`: {e}", path.display())))?
                .with_sample_id(sample_id),
        };
        if out.contains_key(&ann.sample_id) {
            return Err(Error::Data(format!(
                "{}: duplicated annotation for `{}`",
                path.display(),
                ann.sample_id
            )));
        }
        out.insert(ann.sample_id.clone(), ann);
    }
    Ok(out)
}

/// How to pick the incorrect target paired with a spurious-only view
/// when there are more than two classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "seed")]
pub enum ReversedLabelPolicy {
    /// The wrong class the original view scores lowest.
    #[default]
    LeastLikely,
    /// Uniform over the wrong classes from a fixed seed.
    SeededUniform(u64),
}

/// An intentionally incorrect target for `y`. Two classes always give
/// `1 - y`.
pub fn reversed_label(
    y: usize,
    k: usize,
    p0: Option<&ProbVector>,
    policy: ReversedLabelPolicy,
) -> Result<usize> {
    if k < 2 {
        return Err(Error::Unsupported(format!(
            "reversed label needs K >= 2, got {k}"
        )));
    }
    if y >= k {
        return Err(Error::Index(format!("label {y} outside 0..{k}")));
    }
    if k == 2 {
        return Ok(1 - y);
    }
    match policy {
        ReversedLabelPolicy::LeastLikely => {
            let p = p0.ok_or_else(|| {
                Error::Data("least-likely reversed label needs the original-view scores".into())
            })?;
            if p.len() != k {
                return Err(Error::Shape(format!(
                    "scores of length {} for K={k}",
                    p.len()
                )));
            }
            let mut best = None::<(usize, f64)>;
            for (c, &s) in p.scores().iter().enumerate() {
                if c != y && best.is_none_or(|(_, b)| s < b) {
                    best = Some((c, s));
                }
            }
            Ok(best.map(|(c, _)| c).unwrap_or(0))
        }
        ReversedLabelPolicy::SeededUniform(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = rng.random_range(0..k - 1);
            Ok(if r >= y { r + 1 } else { r })
        }
    }
}

/// Per-sample seed for [`ReversedLabelPolicy::SeededUniform`].
pub(crate) fn sample_seed(seed: u64, sample_id: &str) -> u64 {
    let d = util::digest_hex(&[&seed.to_le_bytes(), sample_id.as_bytes()]);
    u64::from_str_radix(&d[..16], 16).unwrap_or(seed)
}

/// Lift of every text token and image tag against the labels of the
/// given samples.
pub fn corpus_lift(
    samples: &[&Sample],
    k: usize,
    extractor: &FeatureExtractor,
    min_support: u64,
) -> Result<LiftTable> {
    let mut docs = Vec::with_capacity(samples.len());
    for s in samples {
        let Some(y) = s.label else { continue };
        let feats = extractor.features(
            s.has_text().then_some(s.text.as_str()),
            s.image_path.as_deref(),
        )?;
        docs.push((feats.into_iter().map(|(f, _)| f).collect::<Vec<_>>(), y));
    }
    LiftTable::from_documents(
        docs.iter().map(|(f, y)| (f.iter().map(String::as_str), *y)),
        k,
        min_support,
    )
}

pub(crate) fn manifest_meta(
    name: &str,
    classes: &ClassSpace,
    virtual_images: bool,
) -> serde_json::Value {
    json!({"name": name, "classes": classes.labels(), "virtual_images": virtual_images})
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn three_line_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "m.jsonl",
            concat!(
                r#"{"id":"a","text":"great day","label":"yes"}"#,
                "\n",
                r#"{"id":"b","text":"meh","label":"no","split":"test"}"#,
                "\n",
                r#"{"id":"c","text":"sure","label":"yes","split":"valid"}"#,
                "\n",
            ),
        );
        let m = DatasetManifest::ingest(&p).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.classes.labels(), ["yes", "no"]);
        assert_eq!(m.class_counts(None)["yes"], 2);
        assert_eq!(m.class_counts(Some(Split::Test))["no"], 1);
        assert_eq!(m.split_samples(Split::Train).len(), 1);

        let out = dir.path().join("copy.jsonl");
        m.write(&out).unwrap();
        let back = DatasetManifest::ingest(&out).unwrap();
        assert_eq!(back.samples, m.samples);
        assert_eq!(back.splits, m.splits);
    }

    #[test]
    fn duplicate_and_unknown_label_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let header =
            r#"{"schema":"mmdebias/manifest","version":1,"meta":{"classes":["no","yes"]}}"#;
        let dup = write(
            dir.path(),
            "d.jsonl",
            &format!(
                "{header}\n{}\n{}\n",
                r#"{"id":"a","text":"x","label":"no"}"#, r#"{"id":"a","text":"y","label":"no"}"#
            ),
        );
        let e = DatasetManifest::ingest(&dup).unwrap_err().to_string();
        assert!(e.contains(":3:") && e.contains("duplicated"), "{e}");
        let unk = write(
            dir.path(),
            "u.jsonl",
            &format!("{header}\n{}\n", r#"{"id":"a","text":"x","label":"maybe"}"#),
        );
        let e = DatasetManifest::ingest(&unk).unwrap_err().to_string();
        assert!(e.contains(":2:") && e.contains("maybe"), "{e}");
    }

    #[test]
    fn missing_image_drops_the_modality() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "m.jsonl",
            concat!(
                r#"{"id":"a","text":"x","image_path":"nope.png","label":"l"}"#,
                "\n",
                r#"{"id":"b","text":"y","label":"m"}"#
            ),
        );
        let m = DatasetManifest::ingest(&p).unwrap();
        assert_eq!(m.samples[0].image_path, None);
        assert_eq!(m.missing_images, ["a"]);
        let p = write(
            dir.path(),
            "n.jsonl",
            concat!(
                r#"{"id":"a","image_path":"nope.png","label":"l"}"#,
                "\n",
                r#"{"id":"b","text":"y","label":"m"}"#
            ),
        );
        assert!(matches!(DatasetManifest::ingest(&p), Err(Error::Data(_))));
    }

    #[test]
    fn reversed_label_examples() {
        assert_eq!(reversed_label(1, 2, None, Default::default()).unwrap(), 0);
        let p0 = ProbVector::probabilities(vec![0.5, 0.3, 0.2]).unwrap();
        assert_eq!(
            reversed_label(0, 3, Some(&p0), ReversedLabelPolicy::LeastLikely).unwrap(),
            2
        );
        assert_eq!(
            reversed_label(2, 3, Some(&p0), ReversedLabelPolicy::LeastLikely).unwrap(),
            1
        );
        assert!(matches!(
            reversed_label(0, 1, None, Default::default()),
            Err(Error::Unsupported(_))
        ));
        assert!(reversed_label(0, 3, None, ReversedLabelPolicy::LeastLikely).is_err());
    }

    proptest! {
        #[test]
        fn reversed_label_never_equals_truth(
            k in 2usize..8,
            y_raw in 0usize..8,
            seed in any::<u64>(),
            scores in proptest::collection::vec(0.01f64..1.0, 8),
        ) {
            let y = y_raw % k;
            let p0 = ProbVector::raw(scores[..k].to_vec());
            for policy in [ReversedLabelPolicy::LeastLikely, ReversedLabelPolicy::SeededUniform(seed)] {
                let r = reversed_label(y, k, Some(&p0), policy).unwrap();
                prop_assert!(r != y && r < k);
                if k == 2 {
                    prop_assert_eq!(r, 1 - y);
                }
            }
        }
    }
}
