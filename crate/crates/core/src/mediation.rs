//! Causal arithmetic over scenario outputs.
//!
//! The three scenario predictions of a sample are
//!
//! * `p0`  = Y(T, I), the full original input,
//! * `p_t` = Y(T_spurious, ϕ), spurious text alone,
//! * `p_i` = Y(ϕ, I_spurious), spurious image alone.
//!
//! The unbiased estimate is the linear correction `p0 − α·p_i − β·p_t`.
//! This module is the only place that definition lives; everything else
//! (routing-gated correction, tuning objectives, the bias-removed loss)
//! calls into it. Corrected vectors stay unnormalized: decisions take the
//! argmax of the raw corrected scores and softmax is applied only when a
//! probability is needed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::categorize::DebiasCategory;
use crate::error::{Error, Result};
use crate::types::ProbVector;

/// Default search interval for every debias weight.
pub const DEFAULT_WEIGHT_BOUNDS: (f64, f64) = (0.0, 1.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOutputs {
    pub p0: ProbVector,
    pub p_t: ProbVector,
    pub p_i: ProbVector,
}

impl ScenarioOutputs {
    pub fn new(p0: ProbVector, p_t: ProbVector, p_i: ProbVector) -> Result<Self> {
        p0.check_same_len(&p_t)?;
        p0.check_same_len(&p_i)?;
        Ok(Self { p0, p_t, p_i })
    }
}

/// Image/text weights of one category.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryWeights {
    pub alpha: f64,
    pub beta: f64,
}

/// Debias coefficients: the global `(α, β)` pair and the per-category
/// pairs used by routed correction and expert combination. Category 1
/// only reads `alpha`, category 2 only `beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub per_category: BTreeMap<u8, CategoryWeights>,
    #[serde(default = "default_bounds")]
    pub bounds: (f64, f64),
}

fn default_bounds() -> (f64, f64) {
    DEFAULT_WEIGHT_BOUNDS
}

impl Default for WeightSet {
    fn default() -> Self {
        Self::zeros()
    }
}

impl WeightSet {
    pub fn zeros() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            per_category: BTreeMap::new(),
            bounds: DEFAULT_WEIGHT_BOUNDS,
        }
    }

    pub fn global(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            ..Self::zeros()
        }
    }

    /// Zero global weights and zero weights for categories 1–3.
    pub fn all_zero_per_category() -> Self {
        let mut w = Self::zeros();
        for c in 1..=3 {
            w.per_category.insert(c, CategoryWeights::default());
        }
        w
    }

    pub fn with_category(mut self, category: u8, alpha: f64, beta: f64) -> Self {
        self.per_category
            .insert(category, CategoryWeights { alpha, beta });
        self
    }

    /// Checks bounds and keys.
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.bounds;
        if !(lo < hi) {
            return Err(Error::Config(format!(
                "weight bounds [{lo}, {hi}] are empty"
            )));
        }
        let in_bounds = |name: &str, x: f64| {
            if x.is_finite() && (lo..=hi).contains(&x) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name}={x} outside [{lo}, {hi}]")))
            }
        };
        in_bounds("alpha", self.alpha)?;
        in_bounds("beta", self.beta)?;
        for (c, w) in &self.per_category {
            if !(1..=3).contains(c) {
                return Err(Error::Config(format!("per-category key {c} not in 1..=3")));
            }
            in_bounds(&format!("alpha_{c}"), w.alpha)?;
            in_bounds(&format!("beta_{c}"), w.beta)?;
        }
        Ok(())
    }

    fn category(&self, c: u8) -> Result<CategoryWeights> {
        self.per_category
            .get(&c)
            .copied()
            .ok_or_else(|| Error::Config(format!("no weights configured for category {c}")))
    }
}

/// TE, NDE and TIE of one intervention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectTriple {
    pub te: Vec<f64>,
    pub nde: Vec<f64>,
    pub tie: Vec<f64>,
}

/// Elementwise `a − b`.
pub fn diff_effect(a: &ProbVector, b: &ProbVector) -> Result<Vec<f64>> {
    a.check_same_len(b)?;
    Ok(a.scores()
        .iter()
        .zip(b.scores())
        .map(|(x, y)| x - y)
        .collect())
}

/// `y_x_mx` = Y(x, M_x), `y_xstar_mxstar` = Y(x*, M_x*),
/// `y_x_mxstar` = Y(x, M_x*).
pub fn effect_triple(
    y_x_mx: &ProbVector,
    y_xstar_mxstar: &ProbVector,
    y_x_mxstar: &ProbVector,
) -> Result<EffectTriple> {
    let te = diff_effect(y_x_mx, y_xstar_mxstar)?;
    let nde = diff_effect(y_x_mxstar, y_xstar_mxstar)?;
    let tie = te.iter().zip(&nde).map(|(t, n)| t - n).collect();
    Ok(EffectTriple { te, nde, tie })
}

fn combine(base: &ProbVector, terms: &[(f64, &ProbVector)]) -> Result<ProbVector> {
    let mut out = base.scores().to_vec();
    for (w, v) in terms {
        base.check_same_len(v)?;
        for (o, x) in out.iter_mut().zip(v.scores()) {
            *o += w * x;
        }
    }
    Ok(ProbVector::raw(out))
}

/// `p0 − α·p_i − β·p_t`, unnormalized.
pub fn mid_correct(s: &ScenarioOutputs, w: &WeightSet) -> Result<ProbVector> {
    correct_with(s, w.alpha, w.beta)
}

fn correct_with(s: &ScenarioOutputs, alpha: f64, beta: f64) -> Result<ProbVector> {
    if !alpha.is_finite() || !beta.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite weights ({alpha}, {beta})"
        )));
    }
    combine(&s.p0, &[(-alpha, &s.p_i), (-beta, &s.p_t)])
}

/// Applies only the modality corrections the category asks for.
pub fn mrid_correct(s: &ScenarioOutputs, c: DebiasCategory, w: &WeightSet) -> Result<ProbVector> {
    match c {
        DebiasCategory::NoDebias => Ok(ProbVector::raw(s.p0.scores().to_vec())),
        DebiasCategory::ImageDebias => correct_with(s, w.category(1)?.alpha, 0.0),
        DebiasCategory::TextDebias => correct_with(s, 0.0, w.category(2)?.beta),
        DebiasCategory::BothDebias => {
            let cw = w.category(3)?;
            correct_with(s, cw.alpha, cw.beta)
        }
        DebiasCategory::Exclude => Err(Error::Routing("exclude is not a routable category".into())),
    }
}

/// Expert outputs for one sample. The debiasing experts are only needed
/// for the categories that select them.
#[derive(Debug, Clone, Copy)]
pub struct ExpertOutputs<'a> {
    pub general: &'a ProbVector,
    pub image: Option<&'a ProbVector>,
    pub text: Option<&'a ProbVector>,
}

/// Routed expert combination. Unlike the correction above, the debiased
/// experts are added.
pub fn moe_combine(
    experts: ExpertOutputs<'_>,
    c: DebiasCategory,
    w: &WeightSet,
) -> Result<ProbVector> {
    fn need<'p>(
        p: Option<&'p ProbVector>,
        name: &str,
        c: DebiasCategory,
    ) -> Result<&'p ProbVector> {
        p.ok_or_else(|| Error::Routing(format!("{name} output required for category {c}")))
    }
    let ge = experts.general;
    match c {
        DebiasCategory::NoDebias => Ok(ProbVector::raw(ge.scores().to_vec())),
        DebiasCategory::ImageDebias => {
            let ide = need(experts.image, "image expert", c)?;
            combine(ge, &[(w.category(1)?.alpha, ide)])
        }
        DebiasCategory::TextDebias => {
            let tde = need(experts.text, "text expert", c)?;
            combine(ge, &[(w.category(2)?.beta, tde)])
        }
        DebiasCategory::BothDebias => {
            let ide = need(experts.image, "image expert", c)?;
            let tde = need(experts.text, "text expert", c)?;
            let cw = w.category(3)?;
            combine(ge, &[(cw.alpha, ide), (cw.beta, tde)])
        }
        DebiasCategory::Exclude => Err(Error::Routing("exclude is not a routable category".into())),
    }
}

/// −log softmax(p0 − α·p_i − β·p_t)[y].
pub fn bias_removed_loss(s: &ScenarioOutputs, w: &WeightSet, y: usize) -> Result<f64> {
    let corrected = mid_correct(s, w)?;
    if y >= corrected.len() {
        return Err(Error::Index(format!(
            "label {y} outside 0..{}",
            corrected.len()
        )));
    }
    // log-sum-exp form keeps the loss finite for large score gaps
    let scores = corrected.scores();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    let loss = lse - scores[y];
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }
    Ok(loss)
}
