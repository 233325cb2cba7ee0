//! Weight search on validation data: an exhaustive lattice and a
//! GP-based Bayesian optimizer with expected improvement.
//!
//! Objectives are evaluated on cached scenario or expert outputs, so a
//! search never touches the prediction backend.

pub mod gp;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::categorize::DebiasCategory;
use crate::error::{Error, Result};
use crate::mediation::{
    mid_correct, moe_combine, mrid_correct, ExpertOutputs, ScenarioOutputs, WeightSet,
};
use crate::metrics::Metric;
use crate::types::ProbVector;
use crate::util;

pub const DEFAULT_BUDGET: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dim {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    dims: Vec<Dim>,
    budget: usize,
}

impl SearchSpace {
    pub fn new(dims: Vec<(&str, f64, f64)>, budget: usize) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Config("search space has no dimensions".into()));
        }
        if budget == 0 {
            return Err(Error::Config("search budget must be >= 1".into()));
        }
        let dims = dims
            .into_iter()
            .map(|(name, lower, upper)| {
                if !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
                    return Err(Error::Config(format!(
                        "dimension `{name}` has bounds [{lower}, {upper}]"
                    )));
                }
                Ok(Dim {
                    name: name.to_string(),
                    lower,
                    upper,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { dims, budget })
    }

    pub fn dims(&self) -> &[Dim] {
        &self.dims
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dims.len()
            && x.iter()
                .zip(&self.dims)
                .all(|(v, d)| (d.lower..=d.upper).contains(v))
    }

    fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(&self.dims)
            .map(|(v, d)| (d.lower + v * (d.upper - d.lower)).clamp(d.lower, d.upper))
            .collect()
    }

    fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.dims)
            .map(|(v, d)| ((v - d.lower) / (d.upper - d.lower)).clamp(0.0, 1.0))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub x: Vec<f64>,
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub method: String,
    pub dims: Vec<String>,
    pub points: Vec<TracePoint>,
    pub best: Vec<f64>,
    pub best_value: f64,
    pub seed: u64,
    pub config_fingerprint: String,
}

impl SearchTrace {
    fn finish(
        method: &str,
        space: &SearchSpace,
        points: Vec<TracePoint>,
        seed: u64,
        fp: String,
    ) -> Result<Self> {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if let Some(v) = p.value {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
        }
        let (i, best_value) = best.ok_or_else(|| {
            Error::Search(format!("all {} objective evaluations failed", points.len()))
        })?;
        Ok(Self {
            method: method.to_string(),
            dims: space.dims.iter().map(|d| d.name.clone()).collect(),
            best: points[i].x.clone(),
            best_value,
            points,
            seed,
            config_fingerprint: fp,
        })
    }

    pub fn evaluations(&self) -> usize {
        self.points.len()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        util::write_json(path, self)
    }
}

fn evaluate<F>(objective: &F, x: Vec<f64>) -> TracePoint
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    match objective(&x) {
        Ok(v) if v.is_finite() => TracePoint {
            x,
            value: Some(v),
            error: None,
        },
        Ok(v) => TracePoint {
            x,
            value: None,
            error: Some(format!("non-finite objective {v}")),
        },
        Err(e) => TracePoint {
            x,
            value: None,
            error: Some(e.to_string()),
        },
    }
}

/// Evaluates the full lattice, first dimension outermost. Ties keep the
/// earliest lattice point.
pub fn grid_search<F>(objective: F, space: &SearchSpace, resolution: usize) -> Result<SearchTrace>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if resolution < 2 {
        return Err(Error::Config("grid resolution must be >= 2".into()));
    }
    let d = space.dims.len();
    let size = resolution
        .checked_pow(d as u32)
        .ok_or_else(|| Error::Search("lattice size overflows".into()))?;
    if size > space.budget {
        return Err(Error::Search(format!(
            "lattice of {size} points exceeds the budget of {}; a budget of {size} is required",
            space.budget
        )));
    }
    let lattice: Vec<Vec<f64>> = (0..size)
        .map(|mut idx| {
            let mut u = vec![0.0; d];
            for slot in u.iter_mut().rev() {
                *slot = (idx % resolution) as f64 / (resolution - 1) as f64;
                idx /= resolution;
            }
            space.from_unit(&u)
        })
        .collect();
    let points: Vec<TracePoint> = lattice
        .into_par_iter()
        .map(|x| evaluate(&objective, x))
        .collect();
    SearchTrace::finish(
        "grid",
        space,
        points,
        0,
        util::fingerprint(&(space, resolution)),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoConfig {
    pub n_init: usize,
    pub candidates: usize,
    pub noise: f64,
    pub xi: f64,
    /// Local refinement starts taken from the best random candidates.
    pub refine_starts: usize,
    pub refine_steps: usize,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            n_init: 8,
            candidates: 1024,
            noise: 1e-6,
            xi: 0.0,
            refine_starts: 4,
            refine_steps: 32,
        }
    }
}

fn latin_hypercube(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; d]; n];
    for j in 0..d {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(rng);
        for (i, s) in strata.into_iter().enumerate() {
            pts[i][j] = (s as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    pts
}

pub fn bayes_optimize<F>(objective: F, space: &SearchSpace, seed: u64) -> Result<SearchTrace>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    bayes_optimize_with(objective, space, seed, &BoConfig::default(), &[])
}

/// GP-EI search. `anchors` (in space coordinates) are evaluated before
/// the space-filling design and count toward the budget.
pub fn bayes_optimize_with<F>(
    objective: F,
    space: &SearchSpace,
    seed: u64,
    cfg: &BoConfig,
    anchors: &[Vec<f64>],
) -> Result<SearchTrace>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let d = space.dims.len();
    let budget = space.budget;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut initial: Vec<Vec<f64>> = anchors
        .iter()
        .filter(|a| space.contains(a))
        .take(budget)
        .cloned()
        .collect();
    let n_lhs = cfg.n_init.min(budget - initial.len());
    initial.extend(
        latin_hypercube(n_lhs, d, &mut rng)
            .iter()
            .map(|u| space.from_unit(u)),
    );
    let mut points: Vec<TracePoint> = initial
        .into_par_iter()
        .map(|x| evaluate(&objective, x))
        .collect();

    let step = Normal::new(0.0, 1.0).expect("unit normal");
    while points.len() < budget {
        let (xs, ys): (Vec<Vec<f64>>, Vec<f64>) = points
            .iter()
            .filter_map(|p| p.value.map(|v| (space.to_unit(&p.x), v)))
            .unzip();
        let next = if xs.is_empty() {
            (0..d).map(|_| rng.random::<f64>()).collect()
        } else {
            let gp = gp::GaussianProcess::fit(&xs, &ys, cfg.noise)?;
            let best = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let ei = |u: &[f64]| gp.expected_improvement(u, best, cfg.xi);

            let mut cands: Vec<(f64, Vec<f64>)> = (0..cfg.candidates)
                .map(|_| {
                    let u: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
                    (ei(&u), u)
                })
                .collect();
            // also start from the incumbent
            let incumbent = xs[ys.iter().position(|y| *y == best).unwrap_or(0)].clone();
            cands.push((ei(&incumbent), incumbent));
            cands.sort_by(|a, b| b.0.total_cmp(&a.0));
            cands.truncate(cfg.refine_starts.max(1));

            let mut chosen = cands[0].clone();
            for (mut score, mut u) in cands {
                let mut radius = 0.1;
                for _ in 0..cfg.refine_steps {
                    let trial: Vec<f64> = u
                        .iter()
                        .map(|v| (v + radius * step.sample(&mut rng)).clamp(0.0, 1.0))
                        .collect();
                    let s = ei(&trial);
                    if s > score {
                        score = s;
                        u = trial;
                    } else {
                        radius *= 0.8;
                    }
                }
                if score > chosen.0 {
                    chosen = (score, u);
                }
            }
            let mut u = chosen.1;
            // a repeat adds nothing to the surrogate
            if xs
                .iter()
                .any(|x| x.iter().zip(&u).all(|(a, b)| (a - b).abs() < 1e-9))
            {
                u = (0..d).map(|_| rng.random::<f64>()).collect();
            }
            u
        };
        points.push(evaluate(&objective, space.from_unit(&next)));
    }
    SearchTrace::finish(
        "bayes",
        space,
        points,
        seed,
        util::fingerprint(&(space, cfg)),
    )
}

/// Which optimizer drives a tuning run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Bayes,
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    pub metric: Option<Metric>,
    pub bounds: (f64, f64),
    pub budget: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub bo: BoConfig,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            metric: None,
            bounds: crate::mediation::DEFAULT_WEIGHT_BOUNDS,
            budget: DEFAULT_BUDGET,
            seed: 0,
            optimizer: Optimizer::Bayes,
            bo: BoConfig::default(),
        }
    }
}

impl TuneConfig {
    fn metric_for(&self, k: usize) -> Metric {
        self.metric.unwrap_or_else(|| Metric::default_for(k))
    }

    fn search<F>(&self, objective: F, space: &SearchSpace) -> Result<SearchTrace>
    where
        F: Fn(&[f64]) -> Result<f64> + Sync,
    {
        let origin = vec![self.bounds.0; space.dims.len()];
        match self.optimizer {
            Optimizer::Bayes => {
                bayes_optimize_with(objective, space, self.seed, &self.bo, &[origin])
            }
            Optimizer::Grid => {
                let d = space.dims.len() as f64;
                let res = (space.budget as f64).powf(1.0 / d).floor().max(2.0) as usize;
                grid_search(objective, space, res)
            }
        }
    }
}

/// Searches global `(α, β)` for the linear correction. The zero-weight
/// point is always evaluated first, so ties fall back to no correction.
pub fn tune_mid(
    valid: &[ScenarioOutputs],
    truths: &[usize],
    cfg: &TuneConfig,
) -> Result<(WeightSet, SearchTrace)> {
    if valid.is_empty() {
        return Err(Error::Data("empty validation set".into()));
    }
    if valid.len() != truths.len() {
        return Err(Error::Shape(
            "scenario outputs and labels differ in length".into(),
        ));
    }
    let k = valid[0].p0.len();
    let metric = cfg.metric_for(k);
    let (lo, hi) = cfg.bounds;
    let space = SearchSpace::new(vec![("alpha", lo, hi), ("beta", lo, hi)], cfg.budget)?;
    let objective = |x: &[f64]| -> Result<f64> {
        let w = WeightSet::global(x[0], x[1]);
        let preds = valid
            .iter()
            .map(|s| mid_correct(s, &w)?.arg_top())
            .collect::<Result<Vec<_>>>()?;
        metric.score(k, truths, &preds)
    };
    let trace = cfg.search(objective, &space)?;
    let mut w = WeightSet::global(trace.best[0], trace.best[1]);
    w.bounds = cfg.bounds;
    Ok((w, trace))
}

/// Expert outputs of one validation sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSample {
    pub general: ProbVector,
    pub image: Option<ProbVector>,
    pub text: Option<ProbVector>,
    pub truth: usize,
}

impl ExpertSample {
    pub fn outputs(&self) -> ExpertOutputs<'_> {
        ExpertOutputs {
            general: &self.general,
            image: self.image.as_ref(),
            text: self.text.as_ref(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MoeTuning {
    pub traces: Vec<(u8, SearchTrace)>,
    pub skipped: Vec<u8>,
}

impl MoeTuning {
    pub fn evaluations(&self) -> usize {
        self.traces.iter().map(|(_, t)| t.evaluations()).sum()
    }
}

/// Independent searches for α₁, β₂ and (α₃, β₃), each restricted to the
/// validation items of that category. `decide` maps an item to a class
/// under candidate weights. Empty categories keep weight 0.
pub fn tune_per_category<T, D>(
    slices: &[(DebiasCategory, Vec<T>)],
    k: usize,
    cfg: &TuneConfig,
    truth: impl Fn(&T) -> usize,
    decide: D,
) -> Result<(WeightSet, MoeTuning)>
where
    T: Sync,
    D: Fn(&T, DebiasCategory, &WeightSet) -> Result<usize> + Sync,
{
    let metric = cfg.metric_for(k);
    let (lo, hi) = cfg.bounds;
    let mut weights = WeightSet::all_zero_per_category();
    weights.bounds = cfg.bounds;
    let mut out = MoeTuning::default();
    for c in [1u8, 2, 3] {
        let cat = DebiasCategory::from_index(c as usize)?;
        let items: Vec<&T> = slices
            .iter()
            .filter(|(sc, _)| *sc == cat)
            .flat_map(|(_, v)| v.iter())
            .collect();
        if items.is_empty() {
            log::warn!("no validation samples routed to category {cat}; its weights stay 0");
            out.skipped.push(c);
            continue;
        }
        let truths: Vec<usize> = items.iter().map(|t| truth(t)).collect();
        let dims = match c {
            1 => vec![("alpha_1", lo, hi)],
            2 => vec![("beta_2", lo, hi)],
            _ => vec![("alpha_3", lo, hi), ("beta_3", lo, hi)],
        };
        let space = SearchSpace::new(dims, cfg.budget)?;
        let to_weights = |x: &[f64]| match c {
            1 => WeightSet::zeros().with_category(1, x[0], 0.0),
            2 => WeightSet::zeros().with_category(2, 0.0, x[0]),
            _ => WeightSet::zeros().with_category(3, x[0], x[1]),
        };
        let objective = |x: &[f64]| -> Result<f64> {
            let w = to_weights(x);
            let preds = items
                .iter()
                .map(|t| decide(t, cat, &w))
                .collect::<Result<Vec<_>>>()?;
            metric.score(k, &truths, &preds)
        };
        let trace = cfg.search(objective, &space)?;
        let tuned = to_weights(&trace.best).per_category[&c];
        weights.per_category.insert(c, tuned);
        out.traces.push((c, trace));
    }
    Ok((weights, out))
}

/// Per-category expert weights for routed expert combination.
pub fn tune_moe(
    slices: &[(DebiasCategory, Vec<ExpertSample>)],
    k: usize,
    cfg: &TuneConfig,
) -> Result<(WeightSet, MoeTuning)> {
    tune_per_category(
        slices,
        k,
        cfg,
        |s| s.truth,
        |s, c, w| moe_combine(s.outputs(), c, w)?.arg_top(),
    )
}

/// Per-category correction weights for routed correction.
pub fn tune_mrid(
    slices: &[(DebiasCategory, Vec<(ScenarioOutputs, usize)>)],
    k: usize,
    cfg: &TuneConfig,
) -> Result<(WeightSet, MoeTuning)> {
    tune_per_category(
        slices,
        k,
        cfg,
        |s| s.1,
        |s, c, w| mrid_correct(&s.0, c, w)?.arg_top(),
    )
}
