//! Shared domain types and length-K probability-vector algebra.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the sum of a normalized vector.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Ordered class labels. The order comes from the dataset manifest and is
/// never sorted, so cached predictions keep stable indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassSpace {
    labels: Vec<String>,
}

impl ClassSpace {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() < 2 {
            return Err(Error::Config(format!(
                "a class space needs at least 2 labels, got {}",
                labels.len()
            )));
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(Error::Config(format!("duplicate class label `{l}`")));
            }
        }
        Ok(Self { labels })
    }

    /// `class0, class1, ...` for generated datasets.
    pub fn numbered(k: usize) -> Result<Self> {
        Self::new((0..k).map(|i| format!("class{i}")))
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn label(&self, idx: usize) -> Option<&str> {
        self.labels.get(idx).map(String::as_str)
    }
}

impl TryFrom<Vec<String>> for ClassSpace {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        ClassSpace::new(v)
    }
}

impl From<ClassSpace> for Vec<String> {
    fn from(c: ClassSpace) -> Self {
        c.labels
    }
}

/// A score vector over K classes. Normalized vectors are probability
/// distributions; corrected vectors are carried raw and may go negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector {
    scores: Vec<f64>,
    normalized: bool,
}

impl ProbVector {
    /// A probability distribution: entries in [0,1] summing to 1.
    pub fn probabilities(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Shape("empty probability vector".into()));
        }
        if scores
            .iter()
            .any(|x| !x.is_finite() || *x < 0.0 || *x > 1.0)
        {
            return Err(Error::Numeric(format!(
                "probabilities must lie in [0,1]: {scores:?}"
            )));
        }
        let sum: f64 = scores.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::Numeric(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self {
            scores,
            normalized: true,
        })
    }

    /// Unnormalized scores (logits, corrected outputs).
    pub fn raw(scores: Vec<f64>) -> Self {
        Self {
            scores,
            normalized: false,
        }
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            scores: vec![1.0 / k as f64; k],
            normalized: true,
        }
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn into_scores(self) -> Vec<f64> {
        self.scores
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn get(&self, idx: usize) -> Option<f64> {
        self.scores.get(idx).copied()
    }

    pub(crate) fn check_same_len(&self, other: &ProbVector) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "vectors of length {} and {}",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self) -> Result<ProbVector> {
        normalize(self)
    }

    pub fn arg_top(&self) -> Result<usize> {
        arg_top(self)
    }
}

/// Softmax of the scores. Argmax is preserved. A vector already flagged
/// as normalized is returned as-is, which makes the map idempotent.
pub fn normalize(p: &ProbVector) -> Result<ProbVector> {
    if p.is_empty() {
        return Err(Error::Shape("cannot normalize an empty vector".into()));
    }
    if let Some(bad) = p.scores.iter().find(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite score {bad}")));
    }
    if p.normalized {
        return Ok(p.clone());
    }
    let max = p.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = p.scores.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ProbVector {
        scores: exps.into_iter().map(|e| e / total).collect(),
        normalized: true,
    })
}

/// Index of the maximum score; ties go to the lowest index.
pub fn arg_top(p: &ProbVector) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in p.scores.iter().enumerate() {
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::Shape("arg_top of an empty vector".into()))
}

/// One dataset record. At least one modality is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub text: String,
    pub image_path: Option<PathBuf>,
    pub label: Option<usize>,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        image_path: Option<PathBuf>,
        label: Option<usize>,
    ) -> Result<Self> {
        let s = Self {
            id: id.into(),
            text: text.into(),
            image_path,
            label,
        };
        if s.text.is_empty() && s.image_path.is_none() {
            return Err(Error::Data(format!("sample `{}` has no modality", s.id)));
        }
        Ok(s)
    }

    pub fn has_text(&self) -> bool {
        !self.text.is_empty()
    }

    pub fn has_image(&self) -> bool {
        self.image_path.is_some()
    }
}

/// Counterfactual inputs built for one sample: the spurious-context-only
/// text and the occluded image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualAsset {
    pub sample_id: String,
    #[serde(default)]
    pub spurious_text: Option<String>,
    #[serde(default)]
    pub spurious_image: Option<PathBuf>,
    /// Nothing semantic could be located in the caption, so the sample
    /// is excluded from categorization.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub text_unmasked: bool,
    /// Share of the image occluded in the counterfactual, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_coverage: Option<f64>,
}

/// Which version of one modality a view presents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Original,
    SpuriousOnly,
    /// The modality is withheld entirely.
    Masked,
}

impl Variant {
    pub fn tag(self) -> &'static str {
        match self {
            Variant::Original => "orig",
            Variant::SpuriousOnly => "spur",
            Variant::Masked => "mask",
        }
    }
}

/// A sample as presented to a predictor. Borrowing keeps the underlying
/// sample untouched.
#[derive(Debug, Clone, Copy)]
pub struct SampleView<'a> {
    base: &'a Sample,
    text_variant: Variant,
    image_variant: Variant,
    text: Option<&'a str>,
    image: Option<&'a Path>,
}

impl<'a> SampleView<'a> {
    pub fn new(
        base: &'a Sample,
        text_variant: Variant,
        image_variant: Variant,
        asset: Option<&'a CounterfactualAsset>,
    ) -> Result<Self> {
        let text = match text_variant {
            Variant::Original => base.has_text().then_some(base.text.as_str()),
            Variant::SpuriousOnly => Some(
                asset
                    .and_then(|a| a.spurious_text.as_deref())
                    .ok_or_else(|| {
                        Error::Data(format!("sample `{}` has no text counterfactual", base.id))
                    })?,
            ),
            Variant::Masked => None,
        };
        let image = match image_variant {
            Variant::Original => base.image_path.as_deref(),
            Variant::SpuriousOnly => Some(
                asset
                    .and_then(|a| a.spurious_image.as_deref())
                    .ok_or_else(|| {
                        Error::Data(format!("sample `{}` has no image counterfactual", base.id))
                    })?,
            ),
            Variant::Masked => None,
        };
        Ok(Self {
            base,
            text_variant,
            image_variant,
            text,
            image,
        })
    }

    /// (T, I)
    pub fn original(base: &'a Sample) -> Self {
        Self {
            base,
            text_variant: Variant::Original,
            image_variant: Variant::Original,
            text: base.has_text().then_some(base.text.as_str()),
            image: base.image_path.as_deref(),
        }
    }

    /// (T_spurious, ϕ)
    pub fn text_spurious(base: &'a Sample, asset: Option<&'a CounterfactualAsset>) -> Result<Self> {
        Self::new(base, Variant::SpuriousOnly, Variant::Masked, asset)
    }

    /// (ϕ, I_spurious)
    pub fn image_spurious(
        base: &'a Sample,
        asset: Option<&'a CounterfactualAsset>,
    ) -> Result<Self> {
        Self::new(base, Variant::Masked, Variant::SpuriousOnly, asset)
    }

    pub fn base(&self) -> &'a Sample {
        self.base
    }

    pub fn text_variant(&self) -> Variant {
        self.text_variant
    }

    pub fn image_variant(&self) -> Variant {
        self.image_variant
    }

    /// Text actually shown, if any.
    pub fn text(&self) -> Option<&'a str> {
        self.text
    }

    /// Image actually shown, if any.
    pub fn image(&self) -> Option<&'a Path> {
        self.image
    }

    /// Stable identity of the presented content, used in cache keys.
    pub fn fingerprint(&self) -> String {
        let text = self.text.unwrap_or("");
        let image = self
            .image
            .map(|p| p.to_string_lossy().into_owned())
            .unwrap_or_default();
        let digest = crate::util::digest_hex(&[text.as_bytes(), b"\x00", image.as_bytes()]);
        format!(
            "t={};i={};{}",
            self.text_variant.tag(),
            self.image_variant.tag(),
            &digest[..16]
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn normalize_symmetric() {
        let p = normalize(&ProbVector::raw(vec![0.0, 0.0])).unwrap();
        assert!(approx(p.scores(), &[0.5, 0.5], 1e-15));
        assert!(p.is_normalized());
    }

    #[test]
    fn normalize_ln3() {
        let p = normalize(&ProbVector::raw(vec![3f64.ln(), 0.0])).unwrap();
        assert!(approx(p.scores(), &[0.75, 0.25], 1e-12));
    }

    #[test]
    fn normalize_keeps_argmax() {
        let raw = ProbVector::raw(vec![2.0, 1.0]);
        assert_eq!(
            arg_top(&raw).unwrap(),
            arg_top(&normalize(&raw).unwrap()).unwrap()
        );
    }

    #[test]
    fn normalize_rejects_non_finite() {
        let err = normalize(&ProbVector::raw(vec![f64::NAN, 0.0])).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        let err = normalize(&ProbVector::raw(vec![f64::INFINITY, 0.0])).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn arg_top_cases() {
        assert_eq!(arg_top(&ProbVector::raw(vec![0.2, 0.8])).unwrap(), 1);
        assert_eq!(arg_top(&ProbVector::raw(vec![0.5, 0.5])).unwrap(), 0);
        assert_eq!(arg_top(&ProbVector::raw(vec![-0.1, -0.3, 0.0])).unwrap(), 2);
        assert!(matches!(
            arg_top(&ProbVector::raw(vec![])).unwrap_err(),
            Error::Shape(_)
        ));
    }

    #[test]
    fn probabilities_validate() {
        assert!(ProbVector::probabilities(vec![0.3, 0.7]).is_ok());
        assert!(ProbVector::probabilities(vec![0.3, 0.6]).is_err());
        assert!(ProbVector::probabilities(vec![-0.1, 1.1]).is_err());
    }

    #[test]
    fn class_space_rules() {
        assert!(ClassSpace::new(["a"]).is_err());
        assert!(ClassSpace::new(["a", "a"]).is_err());
        let c = ClassSpace::new(["no", "yes"]).unwrap();
        assert_eq!(c.k(), 2);
        assert_eq!(c.index_of("yes"), Some(1));
    }

    #[test]
    fn views_require_assets() {
        let s = Sample::new("s1", "hello world", Some("a.png".into()), Some(0)).unwrap();
        assert!(SampleView::text_spurious(&s, None).is_err());
        let asset = CounterfactualAsset {
            sample_id: "s1".into(),
            spurious_text: Some("hello [MASK]".into()),
            spurious_image: None,
            text_unmasked: false,
            mask_coverage: None,
        };
        let v = SampleView::text_spurious(&s, Some(&asset)).unwrap();
        assert_eq!(v.text(), Some("hello [MASK]"));
        assert_eq!(v.image(), None);
        assert!(SampleView::image_spurious(&s, Some(&asset)).is_err());
        // the base sample is untouched
        assert_eq!(s.text, "hello world");
        assert_ne!(v.fingerprint(), SampleView::original(&s).fingerprint());
    }

    #[test]
    fn sample_needs_a_modality() {
        assert!(Sample::new("x", "", None, None).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalize_is_idempotent(v in prop::collection::vec(-30.0f64..30.0, 1..8)) {
                let once = normalize(&ProbVector::raw(v)).unwrap();
                let twice = normalize(&once).unwrap();
                for (a, b) in twice.scores().iter().zip(once.scores()) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
            }

            #[test]
            fn arg_top_survives_normalize(v in prop::collection::vec(-30.0f64..30.0, 1..8)) {
                let raw = ProbVector::raw(v);
                prop_assert_eq!(arg_top(&normalize(&raw).unwrap()).unwrap(), arg_top(&raw).unwrap());
            }
        }
    }
}
