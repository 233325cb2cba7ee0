//! Sparse bag-of-features view of a sample, shared by the synthetic
//! model and the toy experts.
//!
//! Text contributes one `t:<token>` feature per token. An image
//! contributes `i:<tag>` features when the tag table knows its path
//! (generated datasets have tagged, virtual images); otherwise the file is
//! decoded and summarized by a coarse colour histogram.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cf_image::load_image;
use crate::cf_text::DEFAULT_MASK_TOKEN;
use crate::error::{Error, Result};
use crate::types::SampleView;
use crate::util::{self, FileHeader};

pub const TAG_SCHEMA: &str = "mmdebias/image-tags";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagRecord {
    pub path: String,
    pub tags: Vec<String>,
}

/// Object tags per image path.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TagTable {
    map: BTreeMap<String, Vec<String>>,
}

impl TagTable {
    pub fn insert(&mut self, path: impl Into<String>, tags: Vec<String>) {
        self.map.insert(path.into(), tags);
    }

    pub fn get(&self, path: &Path) -> Option<&[String]> {
        self.map
            .get(path.to_string_lossy().as_ref())
            .map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn records(&self) -> Vec<TagRecord> {
        self.map
            .iter()
            .map(|(path, tags)| TagRecord {
                path: path.clone(),
                tags: tags.clone(),
            })
            .collect()
    }

    /// Relative paths in the file are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let (_, recs): (_, Vec<TagRecord>) = util::read_jsonl_expect(path, TAG_SCHEMA)?;
        let dir = path.parent().unwrap_or_else(|| Path::new(""));
        Ok(Self {
            map: recs
                .into_iter()
                .map(|r| {
                    let key = if Path::new(&r.path).is_relative() {
                        dir.join(&r.path).to_string_lossy().into_owned()
                    } else {
                        r.path
                    };
                    (key, r.tags)
                })
                .collect(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let recs = self.records();
        util::write_jsonl(
            path,
            &FileHeader::new(TAG_SCHEMA, util::fingerprint(&recs)),
            &recs,
        )
    }
}

/// Lower-cased word tokens with the mask token removed.
pub fn tokenize(text: &str, mask_token: &str) -> Vec<String> {
    let cleaned = if mask_token.is_empty() {
        text.to_string()
    } else {
        text.replace(mask_token, " ")
    };
    cleaned
        .split(|c: char| !(c.is_alphanumeric() || c == '_' || c == '#' || c == '\''))
        .map(|t| t.trim_matches('\'').to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    tags: Option<Arc<TagTable>>,
    mask_token: String,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self {
            tags: None,
            mask_token: DEFAULT_MASK_TOKEN.to_string(),
        }
    }
}

impl FeatureExtractor {
    pub fn new(tags: Option<Arc<TagTable>>) -> Self {
        Self {
            tags,
            ..Self::default()
        }
    }

    pub fn tags(&self) -> Option<&Arc<TagTable>> {
        self.tags.as_ref()
    }

    pub fn image_tags(&self, image: &Path) -> Option<&[String]> {
        self.tags.as_ref().and_then(|t| t.get(image))
    }

    /// Features of a (text, image) pair; either side may be absent.
    pub fn features(&self, text: Option<&str>, image: Option<&Path>) -> Result<Vec<(String, f64)>> {
        let mut acc: BTreeMap<String, f64> = BTreeMap::new();
        if let Some(text) = text {
            for tok in tokenize(text, &self.mask_token) {
                *acc.entry(format!("t:{tok}")).or_default() += 1.0;
            }
        }
        if let Some(image) = image {
            if let Some(tags) = self.image_tags(image) {
                for tag in tags {
                    *acc.entry(format!("i:{tag}")).or_default() += 1.0;
                }
            } else if image.exists() {
                for (bin, share) in colour_histogram(image)? {
                    *acc.entry(bin).or_default() += share;
                }
            } else {
                return Err(Error::Data(format!(
                    "image {} is neither tagged nor readable",
                    image.display()
                )));
            }
        }
        Ok(acc.into_iter().collect())
    }

    pub fn view_features(&self, view: &SampleView<'_>) -> Result<Vec<(String, f64)>> {
        self.features(view.text(), view.image())
    }
}

/// Share of pixels in each of 8 colour octants.
fn colour_histogram(path: &Path) -> Result<Vec<(String, f64)>> {
    let img = load_image(path)?.to_rgb8();
    let mut bins = [0u64; 8];
    for p in img.pixels() {
        let b = ((p.0[0] >> 7) << 2) | ((p.0[1] >> 7) << 1) | (p.0[2] >> 7);
        bins[b as usize] += 1;
    }
    let total = bins.iter().sum::<u64>().max(1) as f64;
    Ok(bins
        .iter()
        .enumerate()
        .filter(|(_, n)| **n > 0)
        .map(|(i, n)| (format!("px:{i:03b}"), *n as f64 / total))
        .collect())
}
