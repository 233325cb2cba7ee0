//! Training-set emission from a categorization.
//!
//! GE holds every labelled original. IDE adds an image-spurious view with
//! a reversed target for categories 1 and 3, TDE a text-spurious view for
//! 2 and 3, and MCTD both. The router set pairs each routable sample with
//! its category. Excluded samples stay in GE only.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{reversed_label, sample_seed, ReversedLabelPolicy};
use crate::backend::FeatureExtractor;
use crate::categorize::{CategorizationRecord, DebiasCategory};
use crate::error::{Error, Result};
use crate::types::{CounterfactualAsset, ProbVector, Sample, Variant};
use crate::util::{self, FileHeader};

pub const EMITTED_SCHEMA: &str = "mmdebias/emitted";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmitRole {
    Ge,
    Ide,
    Tde,
    Mctd,
    Router,
}

impl EmitRole {
    pub const ALL: [EmitRole; 5] = [
        EmitRole::Ge,
        EmitRole::Ide,
        EmitRole::Tde,
        EmitRole::Mctd,
        EmitRole::Router,
    ];
}

impl fmt::Display for EmitRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmitRole::Ge => "ge",
            EmitRole::Ide => "ide",
            EmitRole::Tde => "tde",
            EmitRole::Mctd => "mctd",
            EmitRole::Router => "router",
        })
    }
}

/// Which inputs a training record presents, with concrete paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewDescriptor {
    pub text_variant: Variant,
    pub image_variant: Variant,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub image: Option<PathBuf>,
}

impl ViewDescriptor {
    pub fn original(s: &Sample) -> Self {
        Self {
            text_variant: Variant::Original,
            image_variant: Variant::Original,
            text: s.has_text().then(|| s.text.clone()),
            image: s.image_path.clone(),
        }
    }

    pub fn features(&self, extractor: &FeatureExtractor) -> Result<Vec<(String, f64)>> {
        extractor.features(self.text.as_deref(), self.image.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmittedRecord {
    pub sample_id: String,
    pub role: EmitRole,
    pub view: ViewDescriptor,
    pub target: usize,
    #[serde(default)]
    pub counterfactual: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmittedSet {
    pub role: EmitRole,
    pub records: Vec<EmittedRecord>,
    /// Fingerprint of the categorization the set was built from.
    pub source: String,
}

impl EmittedSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn counterfactuals(&self) -> usize {
        self.records.iter().filter(|r| r.counterfactual).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmittedTrainingSets {
    pub ge: EmittedSet,
    pub ide: EmittedSet,
    pub tde: EmittedSet,
    pub mctd: EmittedSet,
    pub router: EmittedSet,
    /// (sample id, reason) for additions that could not be built.
    pub skipped: Vec<(String, String)>,
}

impl EmittedTrainingSets {
    pub fn get(&self, role: EmitRole) -> &EmittedSet {
        match role {
            EmitRole::Ge => &self.ge,
            EmitRole::Ide => &self.ide,
            EmitRole::Tde => &self.tde,
            EmitRole::Mctd => &self.mctd,
            EmitRole::Router => &self.router,
        }
    }
}

/// Builds every training set. `p0` supplies original-view scores for the
/// least-likely reversed label when K > 2.
pub fn emit_training_sets(
    samples: &[&Sample],
    k: usize,
    categories: &[CategorizationRecord],
    assets: &BTreeMap<String, CounterfactualAsset>,
    p0: &BTreeMap<String, ProbVector>,
    policy: ReversedLabelPolicy,
) -> Result<EmittedTrainingSets> {
    let source = util::fingerprint(categories);
    let by_id: BTreeMap<&str, DebiasCategory> = categories
        .iter()
        .map(|r| (r.sample_id.as_str(), r.category))
        .collect();
    let set = |role| EmittedSet {
        role,
        records: Vec::new(),
        source: source.clone(),
    };
    let mut out = EmittedTrainingSets {
        ge: set(EmitRole::Ge),
        ide: set(EmitRole::Ide),
        tde: set(EmitRole::Tde),
        mctd: set(EmitRole::Mctd),
        router: set(EmitRole::Router),
        skipped: Vec::new(),
    };
    let mut ide_extra = Vec::new();
    let mut tde_extra = Vec::new();

    for s in samples {
        let Some(y) = s.label else {
            out.skipped.push((s.id.clone(), "unlabelled".into()));
            continue;
        };
        let original = EmittedRecord {
            sample_id: s.id.clone(),
            role: EmitRole::Ge,
            view: ViewDescriptor::original(s),
            target: y,
            counterfactual: false,
        };
        out.ge.records.push(original);

        let Some(&cat) = by_id.get(s.id.as_str()) else {
            out.skipped.push((s.id.clone(), "not categorized".into()));
            continue;
        };
        if let Some(c) = cat.index() {
            out.router.records.push(EmittedRecord {
                sample_id: s.id.clone(),
                role: EmitRole::Router,
                view: ViewDescriptor::original(s),
                target: c,
                counterfactual: false,
            });
        }
        if !(cat.needs_image_expert() || cat.needs_text_expert()) {
            continue;
        }
        let y_hat = match policy {
            ReversedLabelPolicy::SeededUniform(seed) => reversed_label(
                y,
                k,
                None,
                ReversedLabelPolicy::SeededUniform(sample_seed(seed, &s.id)),
            )?,
            ReversedLabelPolicy::LeastLikely => reversed_label(y, k, p0.get(&s.id), policy)?,
        };
        let asset = assets.get(&s.id);
        if cat.needs_image_expert() {
            match asset.and_then(|a| a.spurious_image.clone()) {
                Some(img) => ide_extra.push(EmittedRecord {
                    sample_id: s.id.clone(),
                    role: EmitRole::Ide,
                    view: ViewDescriptor {
                        text_variant: Variant::Masked,
                        image_variant: Variant::SpuriousOnly,
                        text: None,
                        image: Some(img),
                    },
                    target: y_hat,
                    counterfactual: true,
                }),
                None => out
                    .skipped
                    .push((s.id.clone(), "missing counterfactual image".into())),
            }
        }
        if cat.needs_text_expert() {
            match asset.and_then(|a| a.spurious_text.clone()) {
                Some(text) => tde_extra.push(EmittedRecord {
                    sample_id: s.id.clone(),
                    role: EmitRole::Tde,
                    view: ViewDescriptor {
                        text_variant: Variant::SpuriousOnly,
                        image_variant: Variant::Masked,
                        text: Some(text),
                        image: None,
                    },
                    target: y_hat,
                    counterfactual: true,
                }),
                None => out
                    .skipped
                    .push((s.id.clone(), "missing counterfactual text".into())),
            }
        }
    }

    fn with_role(
        recs: &[EmittedRecord],
        role: EmitRole,
    ) -> impl Iterator<Item = EmittedRecord> + '_ {
        recs.iter().cloned().map(move |mut r| {
            r.role = role;
            r
        })
    }
    out.ide.records = with_role(&out.ge.records, EmitRole::Ide)
        .chain(ide_extra.iter().cloned())
        .collect();
    out.tde.records = with_role(&out.ge.records, EmitRole::Tde)
        .chain(tde_extra.iter().cloned())
        .collect();
    out.mctd.records = with_role(&out.ge.records, EmitRole::Mctd)
        .chain(with_role(&ide_extra, EmitRole::Mctd))
        .chain(with_role(&tde_extra, EmitRole::Mctd))
        .collect();
    Ok(out)
}

pub fn write_emitted(path: &Path, set: &EmittedSet) -> Result<()> {
    let header = FileHeader::new(EMITTED_SCHEMA, set.source.clone())
        .with_meta(json!({"role": set.role, "records": set.records.len()}));
    util::write_jsonl(path, &header, &set.records)
}

pub fn read_emitted(path: &Path) -> Result<EmittedSet> {
    let (header, records): (_, Vec<EmittedRecord>) = util::read_jsonl_expect(path, EMITTED_SCHEMA)?;
    let role: EmitRole = serde_json::from_value(header.meta["role"].clone())
        .map_err(|e| Error::Data(format!("{}: bad role: {e}", path.display())))?;
    if let Some(r) = records.iter().find(|r| r.role != role) {
        return Err(Error::Data(format!(
            "{}: record `{}` has role {} in a {role} set",
            path.display(),
            r.sample_id,
            r.role
        )));
    }
    Ok(EmittedSet {
        role,
        records,
        source: header.fingerprint,
    })
}
