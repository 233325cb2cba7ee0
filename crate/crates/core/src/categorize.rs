//! Tolerance-margin categorization of samples by how their spurious
//! contexts move the truth-class probability.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 0.1;

/// Differences this close to the margin count as ties.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Which expert combination a sample needs. `0..=3` are routable;
/// `Exclude` marks samples inside the uncertainty margin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DebiasCategory {
    NoDebias,
    ImageDebias,
    TextDebias,
    BothDebias,
    Exclude,
}

impl DebiasCategory {
    pub const ROUTABLE: [DebiasCategory; 4] = [
        DebiasCategory::NoDebias,
        DebiasCategory::ImageDebias,
        DebiasCategory::TextDebias,
        DebiasCategory::BothDebias,
    ];

    /// Router class index; `None` for `Exclude`.
    pub fn index(self) -> Option<usize> {
        match self {
            DebiasCategory::NoDebias => Some(0),
            DebiasCategory::ImageDebias => Some(1),
            DebiasCategory::TextDebias => Some(2),
            DebiasCategory::BothDebias => Some(3),
            DebiasCategory::Exclude => None,
        }
    }

    pub fn from_index(idx: usize) -> Result<Self> {
        Self::ROUTABLE
            .get(idx)
            .copied()
            .ok_or_else(|| Error::Index(format!("debias category {idx} outside 0..4")))
    }

    pub fn needs_image_expert(self) -> bool {
        matches!(
            self,
            DebiasCategory::ImageDebias | DebiasCategory::BothDebias
        )
    }

    pub fn needs_text_expert(self) -> bool {
        matches!(
            self,
            DebiasCategory::TextDebias | DebiasCategory::BothDebias
        )
    }
}

impl fmt::Display for DebiasCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DebiasCategory::NoDebias => "none",
            DebiasCategory::ImageDebias => "image",
            DebiasCategory::TextDebias => "text",
            DebiasCategory::BothDebias => "both",
            DebiasCategory::Exclude => "exclude",
        };
        f.write_str(s)
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("{name}={p} outside [0,1]")));
    }
    Ok(())
}

/// Applies criteria a–e in order with strict comparisons. `p0_y`, `pt_y`
/// and `pi_y` are the truth-class probabilities under the original,
/// text-spurious and image-spurious views.
pub fn categorize(p0_y: f64, pt_y: f64, pi_y: f64, epsilon: f64) -> Result<DebiasCategory> {
    check_prob("p0_y", p0_y)?;
    check_prob("pt_y", pt_y)?;
    check_prob("pi_y", pi_y)?;
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::Domain(format!("epsilon={epsilon} must be >= 0")));
    }
    // `x` exceeds `y` by more than the margin; rounding-level ties do not count.
    let above = |x: f64, y: f64| x - y - epsilon > TIE_TOLERANCE;
    Ok(if above(pt_y, p0_y) && above(pi_y, p0_y) {
        DebiasCategory::NoDebias
    } else if above(p0_y, pi_y) && above(pt_y, p0_y) {
        DebiasCategory::ImageDebias
    } else if above(p0_y, pt_y) && above(pi_y, p0_y) {
        DebiasCategory::TextDebias
    } else if above(p0_y, pt_y) && above(p0_y, pi_y) {
        DebiasCategory::BothDebias
    } else {
        DebiasCategory::Exclude
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorizationRecord {
    pub sample_id: String,
    pub p0_y: f64,
    pub pt_y: f64,
    pub pi_y: f64,
    pub epsilon: f64,
    pub category: DebiasCategory,
}

/// Per-category counts and percentages.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategorySummary {
    pub total: usize,
    pub counts: BTreeMap<DebiasCategory, usize>,
    pub percentages: BTreeMap<DebiasCategory, f64>,
}

impl CategorySummary {
    pub fn from_categories(cats: impl IntoIterator<Item = DebiasCategory>) -> Self {
        let mut counts = BTreeMap::new();
        let mut total = 0;
        for c in cats {
            *counts.entry(c).or_insert(0) += 1;
            total += 1;
        }
        let percentages = counts
            .iter()
            .map(|(&c, &n)| (c, 100.0 * n as f64 / total.max(1) as f64))
            .collect();
        Self {
            total,
            counts,
            percentages,
        }
    }
}

/// Truth-class probabilities of one sample under the three scenarios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthProbabilities<'a> {
    pub sample_id: &'a str,
    pub p0_y: Option<f64>,
    pub pt_y: Option<f64>,
    pub pi_y: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct CategorizationOutcome {
    pub records: Vec<CategorizationRecord>,
    pub summary: CategorySummary,
    /// Samples that could not be categorized, with the reason.
    pub failures: Vec<(String, String)>,
}

/// Categorizes every sample; incomplete samples are reported, not fatal.
pub fn categorize_dataset<'a>(
    samples: impl IntoIterator<Item = TruthProbabilities<'a>>,
    epsilon: f64,
) -> Result<CategorizationOutcome> {
    let mut out = CategorizationOutcome::default();
    for s in samples {
        let (Some(p0_y), Some(pt_y), Some(pi_y)) = (s.p0_y, s.pt_y, s.pi_y) else {
            out.failures.push((
                s.sample_id.to_string(),
                "missing scenario output".to_string(),
            ));
            continue;
        };
        match categorize(p0_y, pt_y, pi_y, epsilon) {
            Ok(category) => out.records.push(CategorizationRecord {
                sample_id: s.sample_id.to_string(),
                p0_y,
                pt_y,
                pi_y,
                epsilon,
                category,
            }),
            Err(Error::Domain(msg)) => out.failures.push((s.sample_id.to_string(), msg)),
            Err(e) => return Err(e),
        }
    }
    out.summary = CategorySummary::from_categories(out.records.iter().map(|r| r.category));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use DebiasCategory::*;

    #[test]
    fn worked_examples() {
        assert_eq!(categorize(0.6, 0.8, 0.75, 0.1).unwrap(), NoDebias);
        assert_eq!(categorize(0.6, 0.75, 0.4, 0.1).unwrap(), ImageDebias);
        assert_eq!(categorize(0.6, 0.4, 0.75, 0.1).unwrap(), TextDebias);
        assert_eq!(categorize(0.6, 0.3, 0.4, 0.1).unwrap(), BothDebias);
        assert_eq!(categorize(0.6, 0.65, 0.55, 0.1).unwrap(), Exclude);
    }

    #[test]
    fn equality_at_zero_epsilon_is_excluded() {
        for p in [0.0, 0.3, 1.0] {
            assert_eq!(categorize(p, p, p, 0.0).unwrap(), Exclude);
        }
    }

    #[test]
    fn out_of_range_is_domain_error() {
        assert!(matches!(
            categorize(1.2, 0.5, 0.5, 0.1),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            categorize(0.5, 0.5, 0.5, -0.1),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn category_indices_roundtrip() {
        for (i, c) in DebiasCategory::ROUTABLE.iter().enumerate() {
            assert_eq!(c.index(), Some(i));
            assert_eq!(DebiasCategory::from_index(i).unwrap(), *c);
        }
        assert_eq!(Exclude.index(), None);
        assert!(DebiasCategory::from_index(4).is_err());
    }

    #[test]
    fn dataset_summary_and_failures() {
        // 10 samples, exactly one planted as image-debias
        let ids: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let mut rows: Vec<TruthProbabilities> = ids
            .iter()
            .map(|id| TruthProbabilities {
                sample_id: id,
                p0_y: Some(0.5),
                pt_y: Some(0.9),
                pi_y: Some(0.9),
            })
            .collect();
        rows[3].pi_y = Some(0.2);
        rows[3].pt_y = Some(0.8);
        let missing = TruthProbabilities {
            sample_id: "gone",
            p0_y: Some(0.5),
            pt_y: None,
            pi_y: Some(0.1),
        };
        rows.push(missing);
        let out = categorize_dataset(rows, 0.1).unwrap();
        assert_eq!(out.records.len(), 10);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.summary.counts[&ImageDebias], 1);
        assert!((out.summary.percentages[&ImageDebias] - 10.0).abs() < 1e-12);
        assert!((out.summary.percentages[&NoDebias] - 90.0).abs() < 1e-12);
    }
}
