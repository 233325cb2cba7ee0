//! Evaluation arithmetic: confusion matrices, precision/recall/F-scores,
//! lift, per-category error rates and backend-call accounting.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::categorize::DebiasCategory;
use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        Self {
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if k == 0 || counts.iter().any(|r| r.len() != k) {
            return Err(Error::Shape(
                "confusion matrix must be square and non-empty".into(),
            ));
        }
        Ok(Self { counts })
    }

    pub fn from_predictions(k: usize, truths: &[usize], predictions: &[usize]) -> Result<Self> {
        if truths.len() != predictions.len() {
            return Err(Error::Shape(format!(
                "{} truths vs {} predictions",
                truths.len(),
                predictions.len()
            )));
        }
        let mut cm = Self::zeros(k);
        for (&t, &p) in truths.iter().zip(predictions) {
            if t >= k || p >= k {
                return Err(Error::Index(format!("class index {t}/{p} outside 0..{k}")));
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth].iter().sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        self.counts.iter().map(|r| r[predicted]).sum()
    }

    pub fn diagonal(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Share of all predictions that went to this class.
    pub predicted_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub total: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn classification_report(cm: &ConfusionMatrix) -> Result<ClassificationReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let per_class: Vec<ClassMetrics> = (0..cm.k())
        .map(|c| {
            let tp = cm.get(c, c);
            let precision = ratio(tp, cm.col_sum(c));
            let recall = ratio(tp, cm.row_sum(c));
            ClassMetrics {
                precision,
                recall,
                f1: f_beta(precision, recall, 1.0),
                support: cm.row_sum(c),
                predicted_share: ratio(cm.col_sum(c), total),
            }
        })
        .collect();
    let macro_f1 = per_class.iter().map(|m| m.f1).sum::<f64>() / per_class.len() as f64;
    let weighted_f1 = per_class
        .iter()
        .map(|m| m.f1 * m.support as f64)
        .sum::<f64>()
        / total as f64;
    Ok(ClassificationReport {
        accuracy: ratio(cm.diagonal(), total),
        per_class,
        macro_f1,
        weighted_f1,
        total,
    })
}

/// (1+β²)·P·R / (β²·P + R), zero when the denominator vanishes.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = b2 * precision + recall;
    if den <= 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / den
    }
}

/// Among samples whose true class is not `reference`, the fraction of
/// errors that predicted `reference` (the router's "abstain" rate).
pub fn conservative_error_share(cm: &ConfusionMatrix, reference: usize) -> (u64, u64) {
    let mut toward = 0;
    let mut errors = 0;
    for t in (0..cm.k()).filter(|&t| t != reference) {
        errors += cm.row_sum(t) - cm.get(t, t);
        toward += cm.get(t, reference);
    }
    (toward, errors)
}

/// The validation objective used when tuning debias weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Accuracy,
    MacroF1,
    WeightedF1,
    /// F1 of one designated positive class.
    BinaryF1 {
        positive: usize,
    },
}

impl Metric {
    /// Macro-F1 for K>2, positive-class F1 (class 1) for K=2.
    pub fn default_for(k: usize) -> Self {
        if k == 2 {
            Metric::BinaryF1 { positive: 1 }
        } else {
            Metric::MacroF1
        }
    }

    pub fn evaluate(&self, report: &ClassificationReport) -> Result<f64> {
        Ok(match *self {
            Metric::Accuracy => report.accuracy,
            Metric::MacroF1 => report.macro_f1,
            Metric::WeightedF1 => report.weighted_f1,
            Metric::BinaryF1 { positive } => {
                report
                    .per_class
                    .get(positive)
                    .ok_or_else(|| Error::Index(format!("positive class {positive}")))?
                    .f1
            }
        })
    }

    pub fn score(&self, k: usize, truths: &[usize], predictions: &[usize]) -> Result<f64> {
        let cm = ConfusionMatrix::from_predictions(k, truths, predictions)?;
        self.evaluate(&classification_report(&cm)?)
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "accuracy" | "acc" => Metric::Accuracy,
            "macro-f1" => Metric::MacroF1,
            "weighted-f1" => Metric::WeightedF1,
            "f1" | "binary-f1" => Metric::BinaryF1 { positive: 1 },
            other => return Err(Error::Config(format!("unknown metric `{other}`"))),
        })
    }
}

/// Half-up rounding of a fraction to a percentage with 2 decimals.
pub fn percent(x: f64) -> f64 {
    ((x * 10_000.0) + 0.5 + 1e-9).floor() / 100.0
}

/// Lift of a feature for a label: P(label | feature) / P(label).
pub fn lift(joint: u64, feature: u64, label: u64, total: u64) -> Result<f64> {
    if feature == 0 || label == 0 {
        return Err(Error::Unsupported(format!(
            "lift undefined for feature count {feature}, label count {label}"
        )));
    }
    if total == 0 || joint > feature || joint > label || feature > total || label > total {
        return Err(Error::Domain(format!(
            "inconsistent counts joint={joint} feature={feature} label={label} total={total}"
        )));
    }
    Ok((joint as f64 / feature as f64) / (label as f64 / total as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftEntry {
    pub feature: String,
    pub label: usize,
    pub lift: f64,
    /// Number of documents containing the feature.
    pub support: u64,
    pub joint: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LiftTable {
    pub entries: Vec<LiftEntry>,
}

impl LiftTable {
    /// Document-level presence counts. Features seen in fewer than
    /// `min_support` documents are dropped. Sorted by descending lift.
    pub fn from_documents<'a, I, F>(docs: I, k: usize, min_support: u64) -> Result<Self>
    where
        I: IntoIterator<Item = (F, usize)>,
        F: IntoIterator<Item = &'a str>,
    {
        let mut total = 0u64;
        let mut label_counts = vec![0u64; k];
        let mut feature_counts: BTreeMap<&'a str, (u64, Vec<u64>)> = BTreeMap::new();
        for (features, label) in docs {
            if label >= k {
                return Err(Error::Index(format!("label {label} outside 0..{k}")));
            }
            total += 1;
            label_counts[label] += 1;
            let mut seen: Vec<&str> = features.into_iter().collect();
            seen.sort_unstable();
            seen.dedup();
            for f in seen {
                let e = feature_counts.entry(f).or_insert_with(|| (0, vec![0; k]));
                e.0 += 1;
                e.1[label] += 1;
            }
        }
        if total == 0 {
            return Err(Error::Data("empty corpus".into()));
        }
        let mut entries = Vec::new();
        for (feature, (count, joints)) in feature_counts {
            if count < min_support {
                continue;
            }
            for (label, &joint) in joints.iter().enumerate() {
                if label_counts[label] == 0 {
                    continue;
                }
                entries.push(LiftEntry {
                    feature: feature.to_string(),
                    label,
                    lift: lift(joint, count, label_counts[label], total)?,
                    support: count,
                    joint,
                });
            }
        }
        entries.sort_by(|a, b| {
            b.lift
                .total_cmp(&a.lift)
                .then(b.support.cmp(&a.support))
                .then(a.feature.cmp(&b.feature))
                .then(a.label.cmp(&b.label))
        });
        Ok(Self { entries })
    }

    pub fn get(&self, feature: &str, label: usize) -> Option<&LiftEntry> {
        self.entries
            .iter()
            .find(|e| e.feature == feature && e.label == label)
    }

    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("feature,label,lift,support,joint\n");
        for e in &self.entries {
            let label = class_names
                .get(e.label)
                .cloned()
                .unwrap_or_else(|| e.label.to_string());
            out.push_str(&format!(
                "{},{},{:.4},{},{}\n",
                csv_field(&e.feature),
                csv_field(&label),
                e.lift,
                e.support,
                e.joint
            ));
        }
        out
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Error rate per debias category. Categories with no samples are absent.
pub fn per_category_error(
    predictions: &[usize],
    truths: &[usize],
    categories: &[DebiasCategory],
) -> Result<BTreeMap<DebiasCategory, f64>> {
    if predictions.len() != truths.len() || truths.len() != categories.len() {
        return Err(Error::Shape(format!(
            "lengths differ: {} predictions, {} truths, {} categories",
            predictions.len(),
            truths.len(),
            categories.len()
        )));
    }
    let mut tallies: BTreeMap<DebiasCategory, (u64, u64)> = BTreeMap::new();
    for ((&p, &t), &c) in predictions.iter().zip(truths).zip(categories) {
        let e = tallies.entry(c).or_default();
        e.0 += u64::from(p != t);
        e.1 += 1;
    }
    Ok(tallies
        .into_iter()
        .map(|(c, (wrong, n))| (c, wrong as f64 / n as f64))
        .collect())
}

/// Forward-pass counters, one per named scope. Shared across threads.
#[derive(Debug, Clone, Default)]
pub struct CallLedger {
    counters: Arc<Mutex<BTreeMap<String, Arc<AtomicU64>>>>,
}

impl CallLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Handle to a counter; created at zero on first use.
    pub fn counter(&self, scope: &str) -> Arc<AtomicU64> {
        let mut map = self.counters.lock().expect("ledger lock");
        map.entry(scope.to_string())
            .or_insert_with(|| Arc::new(AtomicU64::new(0)))
            .clone()
    }

    pub fn record(&self, scope: &str, calls: u64) {
        self.counter(scope).fetch_add(calls, Ordering::Relaxed);
    }

    pub fn get(&self, scope: &str) -> u64 {
        self.counters
            .lock()
            .expect("ledger lock")
            .get(scope)
            .map(|c| c.load(Ordering::Relaxed))
            .unwrap_or(0)
    }

    pub fn snapshot(&self) -> BTreeMap<String, u64> {
        self.counters
            .lock()
            .expect("ledger lock")
            .iter()
            .map(|(k, v)| (k.clone(), v.load(Ordering::Relaxed)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadVerdict {
    pub method: String,
    pub calls: u64,
    pub min_expected: u64,
    pub max_expected: u64,
    pub pass: bool,
}

/// Checks the recorded forward passes for `method` against the expected
/// multiple of `n_samples`: base, ge and mctd 1×, mid/mrid 3×, mme-jd 1×..3×.
pub fn overhead_check(
    ledger: &CallLedger,
    n_samples: u64,
    method: &str,
) -> Result<OverheadVerdict> {
    let (lo, hi) = match method {
        "base" | "ge" | "mctd" | "mctd-eval" => (n_samples, n_samples),
        "mid" | "mrid" => (3 * n_samples, 3 * n_samples),
        "mme-jd" => (n_samples, 3 * n_samples),
        other => return Err(Error::Config(format!("unknown method `{other}`"))),
    };
    let calls = ledger.get(method);
    Ok(OverheadVerdict {
        method: method.to_string(),
        calls,
        min_expected: lo,
        max_expected: hi,
        pass: (lo..=hi).contains(&calls),
    })
}
