//! File-backed stage orchestration.
//!
//! Every stage reads its inputs from and writes its outputs under one
//! output directory, so any intermediate can be inspected or replaced:
//!
//! ```text
//! out/config.json                  resolved configuration
//! out/cache/predictions.jsonl      persistent prediction cache
//! out/probe/scenarios.jsonl        p0, p_t, p_i per sample
//! out/categorize/categories.jsonl  debias category per labelled sample
//! out/emit/{ge,ide,tde,mctd,router}.jsonl
//! out/experts/{ge,ide,tde,mctd}.json
//! out/router/model.json
//! out/tune/<method>.json           tuned weights (+ .trace.json)
//! out/run/<method>/                report.json, report.txt, predictions.{jsonl,csv}
//! out/report/summary.{txt,csv}
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backend::expert::{train_toy_expert, TrainingExample};
use crate::backend::remote::{HttpTransport, RecordingTransport, ReplayTransport, Transport};
use crate::backend::{
    ExpertRole, FeatureExtractor, PredictionCache, Predictor, RemoteConfig, RemotePredictor,
    SyntheticModel, TagTable, ToyExpert, Tracked, TrainConfig,
};
use crate::categorize::{
    categorize, categorize_dataset, CategorizationOutcome, CategorizationRecord, CategorySummary,
    DebiasCategory, TruthProbabilities, DEFAULT_EPSILON,
};
use crate::cf_image::{generate_for_corpus, read_attention_file, CfImageParams, ImageJobReport};
use crate::cf_text::{mask_corpus, MaskReport, DEFAULT_MASK_TOKEN};
use crate::datasets::{
    corpus_lift, emit_training_sets, read_annotations, read_assets, read_emitted, write_assets,
    write_emitted, DatasetManifest, EmitRole, EmittedTrainingSets, ReversedLabelPolicy, Split,
    ASSETS_FILE, MODEL_FILE, TAGS_FILE,
};
use crate::error::{Error, Result};
use crate::mediation::{
    mid_correct, moe_combine, mrid_correct, ExpertOutputs, ScenarioOutputs, WeightSet,
};
use crate::metrics::{
    classification_report, overhead_check, CallLedger, ClassificationReport, ConfusionMatrix,
    LiftTable, Metric, OverheadVerdict,
};
use crate::router::{
    evaluate_router, route, train_router, DefaultFeaturizer, EmbeddingFeaturizer, Featurizer,
    RouterConfig, RouterEvaluation, RouterFeatures, RouterInput, RouterModel,
};
use crate::tuning::{
    tune_mid, tune_moe, tune_mrid, BoConfig, ExpertSample, Optimizer, SearchTrace, TuneConfig,
};
use crate::types::{ClassSpace, CounterfactualAsset, ProbVector, Sample, SampleView};
use crate::util::{self, FileHeader};

pub const SCENARIO_SCHEMA: &str = "mmdebias/scenarios";
pub const CATEGORY_SCHEMA: &str = "mmdebias/categories";
pub const PREDICTION_SCHEMA: &str = "mmdebias/predictions";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Synthetic,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// The backend on original inputs.
    Base,
    /// The general expert alone.
    Ge,
    Mid,
    Mrid,
    MctdEval,
    MmeJd,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Base,
        Method::Ge,
        Method::Mid,
        Method::Mrid,
        Method::MctdEval,
        Method::MmeJd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::Ge => "ge",
            Method::Mid => "mid",
            Method::Mrid => "mrid",
            Method::MctdEval => "mctd-eval",
            Method::MmeJd => "mme-jd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mctd" => Ok(Method::MctdEval),
            _ => Self::ALL
                .into_iter()
                .find(|m| m.as_str() == s)
                .ok_or_else(|| Error::Config(format!("unknown method `{s}`"))),
        }
    }

    pub fn is_routed(self) -> bool {
        matches!(self, Method::Mrid | Method::MmeJd)
    }

    /// Name of the artifacts a method writes under a routing mode.
    pub fn artifact_name(self, routing: Routing) -> String {
        if self.is_routed() {
            format!("{}-{routing}", self.as_str())
        } else {
            self.as_str().to_string()
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// The trained router picks the strategy.
    #[default]
    Router,
    /// Categories computed from ground-truth labels.
    Oracle,
}

impl fmt::Display for Routing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Routing::Router => "router",
            Routing::Oracle => "oracle",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Manifest file.
    pub dataset: PathBuf,
    /// Image tag table; defaults to the manifest's sibling file when present.
    pub tags: Option<PathBuf>,
    /// Counterfactual assets; defaults to the manifest's sibling file.
    pub assets: Option<PathBuf>,
    pub backend: BackendKind,
    /// Synthetic model file; defaults to the manifest's sibling file.
    pub model: Option<PathBuf>,
    pub remote: RemoteConfig,
    pub replay: Option<PathBuf>,
    pub record: Option<PathBuf>,
    /// Extra tag folded into every cache key.
    pub prompt_version: Option<String>,
    pub epsilon: f64,
    pub bounds: (f64, f64),
    pub budget: usize,
    pub seed: u64,
    pub workers: usize,
    pub out: PathBuf,
    pub metric: Option<Metric>,
    pub optimizer: Optimizer,
    pub bo: BoConfig,
    pub tune_split: Split,
    pub eval_split: Split,
    pub oracle_router: bool,
    pub weights_file: Option<PathBuf>,
    pub cache: bool,
    pub reversed_label: ReversedLabelPolicy,
    pub experts: TrainConfig,
    pub router: RouterConfig,
    /// Externally computed router embeddings instead of the default features.
    pub embeddings: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            tags: None,
            assets: None,
            backend: BackendKind::Synthetic,
            model: None,
            remote: RemoteConfig::default(),
            replay: None,
            record: None,
            prompt_version: None,
            epsilon: DEFAULT_EPSILON,
            bounds: crate::mediation::DEFAULT_WEIGHT_BOUNDS,
            budget: crate::tuning::DEFAULT_BUDGET,
            seed: 0,
            workers: 4,
            out: PathBuf::from("out"),
            metric: None,
            optimizer: Optimizer::Bayes,
            bo: BoConfig::default(),
            tune_split: Split::Valid,
            eval_split: Split::Test,
            oracle_router: false,
            weights_file: None,
            cache: true,
            reversed_label: ReversedLabelPolicy::LeastLikely,
            experts: TrainConfig::default(),
            router: RouterConfig::default(),
            embeddings: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dataset.as_os_str().is_empty() {
            return Err(Error::Config("no dataset given".into()));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon {} must be a finite value >= 0",
                self.epsilon
            )));
        }
        if !(self.bounds.0 < self.bounds.1) {
            return Err(Error::Config(format!(
                "weight bounds {:?} are empty",
                self.bounds
            )));
        }
        if self.budget == 0 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        Ok(())
    }

    pub fn routing(&self) -> Routing {
        if self.oracle_router {
            Routing::Oracle
        } else {
            Routing::Router
        }
    }

    fn tune_config(&self) -> TuneConfig {
        TuneConfig {
            metric: self.metric,
            bounds: self.bounds,
            budget: self.budget,
            seed: self.seed,
            optimizer: self.optimizer,
            bo: self.bo.clone(),
        }
    }
}

/// Locations of every artifact under the output directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn cache(&self) -> PathBuf {
        self.root.join("cache/predictions.jsonl")
    }

    pub fn scenarios(&self) -> PathBuf {
        self.root.join("probe/scenarios.jsonl")
    }

    pub fn categories(&self) -> PathBuf {
        self.root.join("categorize/categories.jsonl")
    }

    pub fn emitted(&self, role: EmitRole) -> PathBuf {
        self.root.join(format!("emit/{role}.jsonl"))
    }

    pub fn expert(&self, role: ExpertRole) -> PathBuf {
        self.root.join(format!("experts/{role}.json"))
    }

    pub fn router_model(&self) -> PathBuf {
        self.root.join("router/model.json")
    }

    pub fn weights(&self, name: &str) -> PathBuf {
        self.root.join(format!("tune/{name}.json"))
    }

    pub fn run_dir(&self, name: &str) -> PathBuf {
        self.root.join(format!("run/{name}"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

fn require(path: &Path, what: &str, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{what} not found at {}; run `{producer}` first",
            path.display()
        )))
    }
}

/// Scenario outputs of one sample; a view without a counterfactual is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub sample_id: String,
    pub split: Split,
    #[serde(default)]
    pub label: Option<usize>,
    pub p0: Vec<f64>,
    #[serde(default)]
    pub p_t: Option<Vec<f64>>,
    #[serde(default)]
    pub p_i: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl ScenarioRecord {
    /// A missing spurious view contributes a zero vector, i.e. no
    /// correction for that modality.
    pub fn outputs(&self) -> Result<ScenarioOutputs> {
        let k = self.p0.len();
        let or_zero =
            |v: &Option<Vec<f64>>| ProbVector::raw(v.clone().unwrap_or_else(|| vec![0.0; k]));
        ScenarioOutputs::new(
            ProbVector::raw(self.p0.clone()),
            or_zero(&self.p_t),
            or_zero(&self.p_i),
        )
    }

    pub fn truth_probabilities(&self) -> Option<TruthProbabilities<'_>> {
        let y = self.label?;
        Some(TruthProbabilities {
            sample_id: &self.sample_id,
            p0_y: self.p0.get(y).copied(),
            pt_y: self.p_t.as_ref().and_then(|v| v.get(y).copied()),
            pi_y: self.p_i.as_ref().and_then(|v| v.get(y).copied()),
        })
    }
}

/// Backend wrapper that folds a user tag into the prompt version.
struct PromptTagged {
    inner: Arc<dyn Predictor>,
    version: String,
}

impl Predictor for PromptTagged {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn class_space(&self) -> &ClassSpace {
        self.inner.class_space()
    }
    fn predict(&self, view: &SampleView<'_>) -> Result<ProbVector> {
        self.inner.predict(view)
    }
    fn prompt_version(&self) -> &str {
        &self.version
    }
}

#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    pub rows: Vec<ScenarioRecord>,
    pub calls: u64,
}

impl ProbeOutcome {
    pub fn flagged(&self) -> impl Iterator<Item = &ScenarioRecord> {
        self.rows.iter().filter(|r| !r.flags.is_empty())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub method: Method,
    pub routing: Option<Routing>,
    pub weights: WeightSet,
    pub traces: Vec<(String, SearchTrace)>,
    pub evaluations: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub sample_id: String,
    pub truth: usize,
    pub predicted: usize,
    pub scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub route: Option<DebiasCategory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub routing: Option<Routing>,
    pub split: Split,
    pub samples: usize,
    pub metric: Metric,
    pub metric_value: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub report: ClassificationReport,
    pub confusion: ConfusionMatrix,
    pub calls: u64,
    pub cache_enabled: bool,
    pub overhead: OverheadVerdict,
    pub weights: Option<WeightSet>,
    pub routes: BTreeMap<String, usize>,
    pub skipped_unlabelled: usize,
    pub config_fingerprint: String,
}

impl RunReport {
    pub fn name(&self) -> String {
        self.method.artifact_name(self.routing.unwrap_or_default())
    }

    pub fn to_text(&self, classes: &ClassSpace) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "method      {}", self.name());
        let _ = writeln!(s, "split       {} ({} samples)", self.split, self.samples);
        let _ = writeln!(s, "accuracy    {:.2}", 100.0 * self.accuracy);
        let _ = writeln!(s, "macro-F1    {:.2}", 100.0 * self.macro_f1);
        let _ = writeln!(s, "weighted-F1 {:.2}", 100.0 * self.weighted_f1);
        let _ = writeln!(
            s,
            "{:<11} {:.2}",
            format!("{:?}", self.metric),
            100.0 * self.metric_value
        );
        let _ = writeln!(
            s,
            "calls       {} ({})",
            self.calls,
            if self.overhead.pass {
                "within budget"
            } else {
                "outside budget"
            }
        );
        if let Some(w) = &self.weights {
            let _ = writeln!(s, "weights     alpha={:.4} beta={:.4}", w.alpha, w.beta);
            for (c, cw) in &w.per_category {
                let _ = writeln!(s, "  c={c}      alpha={:.4} beta={:.4}", cw.alpha, cw.beta);
            }
        }
        if !self.routes.is_empty() {
            let routes: Vec<String> = self
                .routes
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect();
            let _ = writeln!(s, "routes      {}", routes.join(" "));
        }
        let _ = writeln!(s, "class        precision  recall      f1  support");
        for (i, m) in self.report.per_class.iter().enumerate() {
            let _ = writeln!(
                s,
                "{:<12} {:>9.2} {:>7.2} {:>7.2} {:>8}",
                classes.label(i).unwrap_or("?"),
                100.0 * m.precision,
                100.0 * m.recall,
                100.0 * m.f1,
                m.support
            );
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub predictions: Vec<PredictionRow>,
}

struct Experts {
    ge: ToyExpert,
    ide: Option<ToyExpert>,
    tde: Option<ToyExpert>,
}

pub struct Pipeline {
    cfg: RunConfig,
    ws: Workspace,
    manifest: DatasetManifest,
    split_of: HashMap<String, Split>,
    assets: BTreeMap<String, CounterfactualAsset>,
    assets_path: PathBuf,
    tags: Option<Arc<TagTable>>,
    backend: Arc<dyn Predictor>,
    cache: Option<Arc<PredictionCache>>,
    ledger: CallLedger,
    pool: rayon::ThreadPool,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let manifest = DatasetManifest::ingest(&cfg.dataset)?;
        let dir = manifest.dir();
        let tags_path = cfg
            .tags
            .clone()
            .or_else(|| Some(dir.join(TAGS_FILE)).filter(|p| p.exists()));
        let tags = tags_path
            .map(|p| TagTable::load(&p).map(Arc::new))
            .transpose()?;
        let assets_path = cfg.assets.clone().unwrap_or_else(|| dir.join(ASSETS_FILE));
        let assets = if assets_path.exists() {
            read_assets(&assets_path)?
        } else {
            if cfg.assets.is_some() {
                return Err(Error::Config(format!(
                    "assets file {} not found",
                    assets_path.display()
                )));
            }
            log::warn!(
                "no counterfactual assets at {}; spurious views are unavailable",
                assets_path.display()
            );
            BTreeMap::new()
        };
        let backend = Self::make_backend(&cfg, &manifest, tags.clone())?;
        if backend.class_space() != &manifest.classes {
            return Err(Error::Config(format!(
                "backend classes {:?} differ from the dataset's {:?}",
                backend.class_space().labels(),
                manifest.classes.labels()
            )));
        }
        let ws = Workspace::new(&cfg.out);
        let cache = if cfg.cache {
            Some(Arc::new(PredictionCache::open(&ws.cache())?))
        } else {
            None
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers.max(1))
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        let split_of = manifest
            .samples
            .iter()
            .zip(&manifest.splits)
            .map(|(s, sp)| (s.id.clone(), *sp))
            .collect();
        util::write_json(&ws.config(), &cfg)?;
        Ok(Self {
            cfg,
            ws,
            manifest,
            split_of,
            assets,
            assets_path,
            tags,
            backend,
            cache,
            ledger: CallLedger::new(),
            pool,
        })
    }

    fn make_backend(
        cfg: &RunConfig,
        manifest: &DatasetManifest,
        tags: Option<Arc<TagTable>>,
    ) -> Result<Arc<dyn Predictor>> {
        let inner: Arc<dyn Predictor> = match cfg.backend {
            BackendKind::Synthetic => {
                let path = cfg
                    .model
                    .clone()
                    .unwrap_or_else(|| manifest.dir().join(MODEL_FILE));
                if !path.exists() {
                    return Err(Error::Config(format!(
                        "no synthetic model at {}; create a dataset with `generate` or pass a model file",
                        path.display()
                    )));
                }
                Arc::new(SyntheticModel::load(&path, tags)?)
            }
            BackendKind::Remote => {
                let transport: Box<dyn Transport> = match (&cfg.replay, &cfg.record) {
                    (Some(replay), _) => Box::new(ReplayTransport::open(replay)?),
                    (None, Some(record)) => Box::new(RecordingTransport::new(
                        HttpTransport::new(&cfg.remote),
                        record,
                    )?),
                    (None, None) => Box::new(HttpTransport::new(&cfg.remote)),
                };
                Arc::new(RemotePredictor::new(
                    manifest.classes.clone(),
                    cfg.remote.clone(),
                    transport,
                )?)
            }
        };
        Ok(match &cfg.prompt_version {
            Some(tag) => {
                let version = format!("{}+{tag}", inner.prompt_version());
                Arc::new(PromptTagged { inner, version })
            }
            None => inner,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn workspace(&self) -> &Workspace {
        &self.ws
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn ledger(&self) -> &CallLedger {
        &self.ledger
    }

    pub fn backend(&self) -> &Arc<dyn Predictor> {
        &self.backend
    }

    pub fn assets(&self) -> &BTreeMap<String, CounterfactualAsset> {
        &self.assets
    }

    fn k(&self) -> usize {
        self.manifest.classes.k()
    }

    fn fingerprint(&self) -> String {
        util::fingerprint(&self.cfg)
    }

    fn freeze(&self, dir: &Path) -> Result<()> {
        util::write_json(&dir.join("config.json"), &self.cfg)
    }

    fn par_map<T, R, F>(&self, items: &[T], f: F) -> Result<Vec<R>>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> Result<R> + Sync + Send,
    {
        self.pool.install(|| items.par_iter().map(f).collect())
    }

    fn tracked<P: Predictor>(&self, p: P, scope: &str) -> Tracked<P> {
        Tracked::new(p, self.cache.clone(), self.ledger.clone(), scope)
    }

    fn sample(&self, id: &str) -> Result<&Sample> {
        self.manifest
            .samples
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Data(format!("sample `{id}` is not in the manifest")))
    }

    fn labelled(&self, split: Split) -> (Vec<&Sample>, usize) {
        let all = self.manifest.split_samples(split);
        let n = all.len();
        let kept: Vec<&Sample> = all.into_iter().filter(|s| s.label.is_some()).collect();
        let skipped = n - kept.len();
        (kept, skipped)
    }

    /// p0 for every sample plus p_t and p_i where the counterfactual exists.
    pub fn scenario_rows(&self, samples: &[&Sample], scope: &str) -> Result<Vec<ScenarioRecord>> {
        let backend = self.tracked(self.backend.clone(), scope);
        self.par_map(samples, |s| {
            let asset = self.assets.get(&s.id);
            let p0 = backend.predict(&SampleView::original(s))?.into_scores();
            let mut flags = Vec::new();
            let p_t = match asset.filter(|a| a.spurious_text.is_some()) {
                Some(a) => Some(
                    backend
                        .predict(&SampleView::text_spurious(s, Some(a))?)?
                        .into_scores(),
                ),
                None => {
                    flags.push("no text counterfactual".to_string());
                    None
                }
            };
            let p_i = match asset.filter(|a| a.spurious_image.is_some()) {
                Some(a) => Some(
                    backend
                        .predict(&SampleView::image_spurious(s, Some(a))?)?
                        .into_scores(),
                ),
                None => {
                    flags.push("no image counterfactual".to_string());
                    None
                }
            };
            if asset.is_some_and(|a| a.text_unmasked) {
                flags.push("no semantic text located".to_string());
            }
            Ok(ScenarioRecord {
                sample_id: s.id.clone(),
                split: self.split_of[&s.id],
                label: s.label,
                p0,
                p_t,
                p_i,
                flags,
            })
        })
    }

    /// Caches all three scenario outputs for every sample.
    pub fn probe(&self) -> Result<ProbeOutcome> {
        let samples: Vec<&Sample> = self.manifest.samples.iter().collect();
        let before = self.ledger.get("probe");
        let rows = self.scenario_rows(&samples, "probe")?;
        let calls = self.ledger.get("probe") - before;
        let header = FileHeader::new(SCENARIO_SCHEMA, self.fingerprint()).with_meta(json!({
            "backend": self.backend.id(),
            "prompt_version": self.backend.prompt_version(),
            "classes": self.manifest.classes.labels(),
        }));
        util::write_jsonl(&self.ws.scenarios(), &header, &rows)?;
        self.freeze(&self.ws.root().join("probe"))?;
        Ok(ProbeOutcome { rows, calls })
    }

    pub fn load_scenarios(&self) -> Result<Vec<ScenarioRecord>> {
        let path = self.ws.scenarios();
        require(&path, "scenario outputs", "probe")?;
        Ok(util::read_jsonl_expect(&path, SCENARIO_SCHEMA)?.1)
    }

    fn categorize_rows(&self, rows: &[ScenarioRecord]) -> Result<CategorizationOutcome> {
        let mut out = categorize_dataset(
            rows.iter().filter_map(ScenarioRecord::truth_probabilities),
            self.cfg.epsilon,
        )?;
        for rec in &mut out.records {
            if self
                .assets
                .get(&rec.sample_id)
                .is_some_and(|a| a.text_unmasked)
            {
                rec.category = DebiasCategory::Exclude;
            }
        }
        out.summary = CategorySummary::from_categories(out.records.iter().map(|r| r.category));
        Ok(out)
    }

    /// Assigns a debias category to every labelled, fully probed sample.
    pub fn categorize(&self) -> Result<CategorizationOutcome> {
        let rows = self.load_scenarios()?;
        let out = self.categorize_rows(&rows)?;
        let mut per_split = BTreeMap::new();
        for split in Split::ALL {
            let cats = out
                .records
                .iter()
                .filter(|r| self.split_of.get(&r.sample_id) == Some(&split))
                .map(|r| r.category);
            per_split.insert(split.to_string(), CategorySummary::from_categories(cats));
        }
        let header =
            FileHeader::new(CATEGORY_SCHEMA, util::fingerprint(&out.records)).with_meta(json!({
                "epsilon": self.cfg.epsilon,
                "summary": out.summary,
                "per_split": per_split,
                "failures": out.failures,
            }));
        util::write_jsonl(&self.ws.categories(), &header, &out.records)?;
        self.freeze(&self.ws.root().join("categorize"))?;
        Ok(out)
    }

    pub fn load_categories(&self) -> Result<Vec<CategorizationRecord>> {
        let path = self.ws.categories();
        require(&path, "categories", "categorize")?;
        Ok(util::read_jsonl_expect(&path, CATEGORY_SCHEMA)?.1)
    }

    /// Training sets for the experts and the router from the training split.
    pub fn emit(&self) -> Result<EmittedTrainingSets> {
        let cats = self.load_categories()?;
        let rows = self.load_scenarios()?;
        let p0 = rows
            .iter()
            .map(|r| {
                Ok((
                    r.sample_id.clone(),
                    ProbVector::probabilities(r.p0.clone())?,
                ))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        let train = self.manifest.split_samples(Split::Train);
        let sets = emit_training_sets(
            &train,
            self.k(),
            &cats,
            &self.assets,
            &p0,
            self.cfg.reversed_label,
        )?;
        for role in EmitRole::ALL {
            write_emitted(&self.ws.emitted(role), sets.get(role))?;
        }
        util::write_json(&self.ws.root().join("emit/skipped.json"), &sets.skipped)?;
        self.freeze(&self.ws.root().join("emit"))?;
        Ok(sets)
    }

    /// Fits GE, IDE, TDE and MCTD on the emitted sets.
    pub fn train_experts(&self) -> Result<Vec<ToyExpert>> {
        let extractor = FeatureExtractor::new(self.tags.clone());
        let cfg = TrainConfig {
            seed: self.cfg.seed,
            ..self.cfg.experts.clone()
        };
        let mut out = Vec::new();
        for (role, emit_role) in [
            (ExpertRole::Ge, EmitRole::Ge),
            (ExpertRole::Ide, EmitRole::Ide),
            (ExpertRole::Tde, EmitRole::Tde),
            (ExpertRole::Mctd, EmitRole::Mctd),
        ] {
            let path = self.ws.emitted(emit_role);
            require(&path, "emitted training sets", "emit")?;
            let set = read_emitted(&path)?;
            let examples = self.par_map(&set.records, |r| {
                Ok(TrainingExample {
                    features: r.view.features(&extractor)?,
                    target: r.target,
                    counterfactual: r.counterfactual,
                })
            })?;
            let expert = train_toy_expert(
                role,
                &self.manifest.classes,
                &examples,
                &cfg,
                self.tags.clone(),
            )?;
            expert.save(&self.ws.expert(role))?;
            out.push(expert);
        }
        self.freeze(&self.ws.root().join("experts"))?;
        Ok(out)
    }

    pub fn load_expert(&self, role: ExpertRole) -> Result<ToyExpert> {
        let path = self.ws.expert(role);
        require(&path, &format!("{role} expert"), "train-experts")?;
        ToyExpert::load(&path, self.tags.clone())
    }

    fn featurizer(&self) -> Result<Box<dyn Featurizer>> {
        Ok(match &self.cfg.embeddings {
            Some(p) => Box::new(EmbeddingFeaturizer::load(p)?),
            None => Box::new(DefaultFeaturizer { k: self.k() }),
        })
    }

    fn router_features(&self, pairs: &[(&Sample, &ScenarioRecord)]) -> Result<Vec<RouterFeatures>> {
        let f = self.featurizer()?;
        pairs
            .iter()
            .map(|(s, r)| {
                let outs = r.outputs()?;
                let asset = self.assets.get(&s.id);
                f.featurize(&RouterInput {
                    sample_id: &s.id,
                    scenario: Some(&outs),
                    text: &s.text,
                    spurious_text: asset.and_then(|a| a.spurious_text.as_deref()),
                    mask_coverage: asset.and_then(|a| a.mask_coverage),
                })
            })
            .collect()
    }

    /// Fits the router on the emitted router set; checkpoints are chosen
    /// on the tuning split's categories.
    pub fn train_router(&self) -> Result<(RouterModel, Option<RouterEvaluation>)> {
        let path = self.ws.emitted(EmitRole::Router);
        require(&path, "router training set", "emit")?;
        let set = read_emitted(&path)?;
        let rows = self.load_scenarios()?;
        let by_id: HashMap<&str, &ScenarioRecord> =
            rows.iter().map(|r| (r.sample_id.as_str(), r)).collect();
        let cats = self.load_categories()?;

        let mut pairs = Vec::new();
        let mut labels = Vec::new();
        for rec in &set.records {
            let Some(row) = by_id.get(rec.sample_id.as_str()) else {
                log::warn!("no scenario outputs for router sample `{}`", rec.sample_id);
                continue;
            };
            pairs.push((self.sample(&rec.sample_id)?, *row));
            labels.push(rec.target);
        }
        let x = self.router_features(&pairs)?;

        let split_set = |split: Split| -> Result<(Vec<RouterFeatures>, Vec<DebiasCategory>)> {
            let mut pairs = Vec::new();
            let mut truth = Vec::new();
            for c in &cats {
                if self.split_of.get(&c.sample_id) != Some(&split) || c.category.index().is_none() {
                    continue;
                }
                if let Some(row) = by_id.get(c.sample_id.as_str()) {
                    pairs.push((self.sample(&c.sample_id)?, *row));
                    truth.push(c.category);
                }
            }
            Ok((self.router_features(&pairs)?, truth))
        };
        let (vx, vc) = split_set(self.cfg.tune_split)?;
        let vy: Vec<usize> = vc.iter().filter_map(|c| c.index()).collect();
        let cfg = RouterConfig {
            seed: self.cfg.seed,
            ..self.cfg.router.clone()
        };
        let valid = (!vx.is_empty()).then_some((vx.as_slice(), vy.as_slice()));
        let model = train_router(&x, &labels, valid, &cfg)?;
        model.save(&self.ws.router_model())?;

        let (ex, ec) = split_set(self.cfg.eval_split)?;
        let eval = if ex.is_empty() {
            None
        } else {
            let e = evaluate_router(&model, &ex, &ec)?;
            util::write_json(&self.ws.root().join("router/evaluation.json"), &e)?;
            Some(e)
        };
        self.freeze(&self.ws.root().join("router"))?;
        Ok((model, eval))
    }

    pub fn load_router(&self) -> Result<RouterModel> {
        let path = self.ws.router_model();
        require(&path, "router model", "train-router")?;
        RouterModel::load(&path)
    }

    /// Strategy per sample. Oracle routing categorizes with the true
    /// label; excluded or uncategorizable samples get no debiasing.
    fn routes(
        &self,
        samples: &[&Sample],
        rows: &[ScenarioRecord],
        routing: Routing,
    ) -> Result<Vec<DebiasCategory>> {
        match routing {
            Routing::Oracle => Ok(rows
                .iter()
                .map(|r| {
                    let unmasked = self
                        .assets
                        .get(&r.sample_id)
                        .is_some_and(|a| a.text_unmasked);
                    let cat =
                        r.truth_probabilities()
                            .and_then(|t| match (t.p0_y, t.pt_y, t.pi_y) {
                                (Some(a), Some(b), Some(c)) => {
                                    categorize(a, b, c, self.cfg.epsilon).ok()
                                }
                                _ => None,
                            });
                    match cat {
                        Some(c) if c.index().is_some() && !unmasked => c,
                        _ => DebiasCategory::NoDebias,
                    }
                })
                .collect()),
            Routing::Router => {
                let model = self.load_router()?;
                let pairs: Vec<(&Sample, &ScenarioRecord)> =
                    samples.iter().copied().zip(rows).collect();
                self.router_features(&pairs)?
                    .iter()
                    .map(|f| route(&model, f))
                    .collect()
            }
        }
    }

    fn experts_for(&self, routes: &[DebiasCategory]) -> Result<Experts> {
        let need_i = routes.iter().any(|c| c.needs_image_expert());
        let need_t = routes.iter().any(|c| c.needs_text_expert());
        Ok(Experts {
            ge: self.load_expert(ExpertRole::Ge)?,
            ide: need_i
                .then(|| self.load_expert(ExpertRole::Ide))
                .transpose()?,
            tde: need_t
                .then(|| self.load_expert(ExpertRole::Tde))
                .transpose()?,
        })
    }

    /// GE on every sample, IDE/TDE only where the route selects them.
    fn expert_samples(
        &self,
        samples: &[&Sample],
        routes: &[DebiasCategory],
        experts: &Experts,
        scope: &str,
    ) -> Result<Vec<ExpertSample>> {
        let ge = self.tracked(&experts.ge, scope);
        let ide = experts.ide.as_ref().map(|e| self.tracked(e, scope));
        let tde = experts.tde.as_ref().map(|e| self.tracked(e, scope));
        let items: Vec<(&Sample, DebiasCategory)> = samples
            .iter()
            .copied()
            .zip(routes.iter().copied())
            .collect();
        self.par_map(&items, |(s, c)| {
            let view = SampleView::original(s);
            let pick =
                |e: &Option<Tracked<&ToyExpert>>, needed: bool| -> Result<Option<ProbVector>> {
                    match (e, needed) {
                        (Some(e), true) => Ok(Some(e.predict(&view)?)),
                        (None, true) => Err(Error::Routing("debias expert not loaded".into())),
                        _ => Ok(None),
                    }
                };
            Ok(ExpertSample {
                general: ge.predict(&view)?,
                image: pick(&ide, c.needs_image_expert())?,
                text: pick(&tde, c.needs_text_expert())?,
                truth: s.label.unwrap_or(0),
            })
        })
    }

    /// Searches debias weights on the tuning split and stores them.
    pub fn tune(&self, method: Method, routing: Routing) -> Result<TuneOutcome> {
        let (samples, _) = self.labelled(self.cfg.tune_split);
        if samples.is_empty() {
            return Err(Error::Data(format!(
                "no labelled samples in the {} split",
                self.cfg.tune_split
            )));
        }
        let truths: Vec<usize> = samples.iter().filter_map(|s| s.label).collect();
        let tcfg = self.cfg.tune_config();
        let k = self.k();
        let slices = |routes: &[DebiasCategory]| -> Vec<(DebiasCategory, Vec<usize>)> {
            DebiasCategory::ROUTABLE
                .iter()
                .map(|c| {
                    (
                        *c,
                        routes
                            .iter()
                            .enumerate()
                            .filter(|(_, r)| *r == c)
                            .map(|(i, _)| i)
                            .collect(),
                    )
                })
                .collect()
        };
        let (weights, traces, routing) = match method {
            Method::Mid => {
                let rows = self.scenario_rows(&samples, "tune")?;
                let outs = rows
                    .iter()
                    .map(ScenarioRecord::outputs)
                    .collect::<Result<Vec<_>>>()?;
                let (w, trace) = tune_mid(&outs, &truths, &tcfg)?;
                (w, vec![("global".to_string(), trace)], None)
            }
            Method::Mrid => {
                let rows = self.scenario_rows(&samples, "tune")?;
                let routes = self.routes(&samples, &rows, routing)?;
                let outs = rows
                    .iter()
                    .map(ScenarioRecord::outputs)
                    .collect::<Result<Vec<_>>>()?;
                let sl: Vec<(DebiasCategory, Vec<(ScenarioOutputs, usize)>)> = slices(&routes)
                    .into_iter()
                    .map(|(c, idx)| {
                        (
                            c,
                            idx.into_iter()
                                .map(|i| (outs[i].clone(), truths[i]))
                                .collect(),
                        )
                    })
                    .collect();
                let (w, t) = tune_mrid(&sl, k, &tcfg)?;
                (
                    w,
                    t.traces
                        .into_iter()
                        .map(|(c, t)| (format!("c{c}"), t))
                        .collect(),
                    Some(routing),
                )
            }
            Method::MmeJd => {
                let rows = self.scenario_rows(&samples, "tune")?;
                let routes = self.routes(&samples, &rows, routing)?;
                let experts = self.experts_for(&routes)?;
                let es = self.expert_samples(&samples, &routes, &experts, "tune")?;
                let sl: Vec<(DebiasCategory, Vec<ExpertSample>)> = slices(&routes)
                    .into_iter()
                    .map(|(c, idx)| (c, idx.into_iter().map(|i| es[i].clone()).collect()))
                    .collect();
                let (w, t) = tune_moe(&sl, k, &tcfg)?;
                (
                    w,
                    t.traces
                        .into_iter()
                        .map(|(c, t)| (format!("c{c}"), t))
                        .collect(),
                    Some(routing),
                )
            }
            other => {
                return Err(Error::Config(format!(
                    "method `{other}` has no weights to tune"
                )))
            }
        };
        let name = method.artifact_name(routing.unwrap_or_default());
        util::write_json(&self.ws.weights(&name), &weights)?;
        let outcome = TuneOutcome {
            method,
            routing,
            evaluations: traces.iter().map(|(_, t)| t.evaluations()).sum(),
            weights,
            traces,
            samples: samples.len(),
        };
        util::write_json(
            &self.ws.root().join(format!("tune/{name}.trace.json")),
            &outcome.traces,
        )?;
        self.freeze(&self.ws.root().join("tune"))?;
        Ok(outcome)
    }

    fn load_weights(&self, method: Method, routing: Routing) -> Result<WeightSet> {
        let path = match &self.cfg.weights_file {
            Some(p) => p.clone(),
            None => self.ws.weights(&method.artifact_name(routing)),
        };
        if !path.exists() {
            let flag = if method.is_routed() && routing == Routing::Oracle {
                " --oracle-router"
            } else {
                ""
            };
            return Err(Error::Config(format!(
                "no weights at {}; run `tune --method {method}{flag}` first",
                path.display()
            )));
        }
        let w: WeightSet = util::read_json(&path)?;
        w.validate()?;
        Ok(w)
    }

    /// Evaluates one method on the evaluation split.
    pub fn run(&self, method: Method, routing: Routing) -> Result<RunOutcome> {
        let (samples, skipped) = self.labelled(self.cfg.eval_split);
        if samples.is_empty() {
            return Err(Error::Data(format!(
                "no labelled samples in the {} split",
                self.cfg.eval_split
            )));
        }
        let truths: Vec<usize> = samples.iter().filter_map(|s| s.label).collect();
        let scope = method.as_str();
        let before = self.ledger.get(scope);
        let single = |p: &dyn Predictor| -> Result<Vec<ProbVector>> {
            let t = self.tracked(p, scope);
            self.par_map(&samples, |s| t.predict(&SampleView::original(s)))
        };
        let mut weights = None;
        let mut routes = None;
        let scores: Vec<ProbVector> = match method {
            Method::Base => single(self.backend.as_ref())?,
            Method::Ge => single(&self.load_expert(ExpertRole::Ge)?)?,
            Method::MctdEval => single(&self.load_expert(ExpertRole::Mctd)?)?,
            Method::Mid => {
                let w = self.load_weights(method, routing)?;
                let rows = self.scenario_rows(&samples, scope)?;
                let out = rows
                    .iter()
                    .map(|r| mid_correct(&r.outputs()?, &w))
                    .collect::<Result<_>>()?;
                weights = Some(w);
                out
            }
            Method::Mrid => {
                let w = self.load_weights(method, routing)?;
                let rows = self.scenario_rows(&samples, scope)?;
                let r = self.routes(&samples, &rows, routing)?;
                let out = rows
                    .iter()
                    .zip(&r)
                    .map(|(row, c)| mrid_correct(&row.outputs()?, *c, &w))
                    .collect::<Result<_>>()?;
                weights = Some(w);
                routes = Some(r);
                out
            }
            Method::MmeJd => {
                let w = self.load_weights(method, routing)?;
                let rows = self.scenario_rows(&samples, &format!("{scope}/router"))?;
                let r = self.routes(&samples, &rows, routing)?;
                let experts = self.experts_for(&r)?;
                let es = self.expert_samples(&samples, &r, &experts, scope)?;
                let out = es
                    .iter()
                    .zip(&r)
                    .map(|(e, c)| {
                        moe_combine(
                            ExpertOutputs {
                                general: &e.general,
                                image: e.image.as_ref(),
                                text: e.text.as_ref(),
                            },
                            *c,
                            &w,
                        )
                    })
                    .collect::<Result<_>>()?;
                weights = Some(w);
                routes = Some(r);
                out
            }
        };
        let calls = self.ledger.get(scope) - before;

        let predicted = scores
            .iter()
            .map(ProbVector::arg_top)
            .collect::<Result<Vec<_>>>()?;
        let confusion = ConfusionMatrix::from_predictions(self.k(), &truths, &predicted)?;
        let report = classification_report(&confusion)?;
        let metric = self
            .cfg
            .metric
            .unwrap_or_else(|| Metric::default_for(self.k()));
        let mut overhead = overhead_check(&self.ledger, 0, scope)?;
        let n = samples.len() as u64;
        overhead.calls = calls;
        (overhead.min_expected, overhead.max_expected) = match method {
            Method::Mid | Method::Mrid => (3 * n, 3 * n),
            Method::MmeJd => (n, 3 * n),
            _ => (n, n),
        };
        // Cache hits can only lower the count, so the floor holds only when cold.
        overhead.pass = calls <= overhead.max_expected
            && (calls >= overhead.min_expected || self.cache.is_some());
        let mut route_counts = BTreeMap::new();
        if let Some(r) = &routes {
            for c in r {
                *route_counts.entry(c.to_string()).or_insert(0) += 1;
            }
        }
        let predictions: Vec<PredictionRow> = samples
            .iter()
            .zip(&scores)
            .zip(&predicted)
            .enumerate()
            .map(|(i, ((s, p), &pred))| PredictionRow {
                sample_id: s.id.clone(),
                truth: truths[i],
                predicted: pred,
                scores: p.scores().to_vec(),
                route: routes.as_ref().map(|r| r[i]),
            })
            .collect();
        let report = RunReport {
            method,
            routing: method.is_routed().then_some(routing),
            split: self.cfg.eval_split,
            samples: samples.len(),
            metric,
            metric_value: metric.evaluate(&report)?,
            accuracy: report.accuracy,
            macro_f1: report.macro_f1,
            weighted_f1: report.weighted_f1,
            report,
            confusion,
            calls,
            cache_enabled: self.cache.is_some(),
            overhead,
            weights,
            routes: route_counts,
            skipped_unlabelled: skipped,
            config_fingerprint: self.fingerprint(),
        };
        self.write_run(&report, &predictions)?;
        Ok(RunOutcome {
            report,
            predictions,
        })
    }

    fn write_run(&self, report: &RunReport, predictions: &[PredictionRow]) -> Result<()> {
        let dir = self.ws.run_dir(&report.name());
        util::write_json(&dir.join("report.json"), report)?;
        util::write_atomic(
            &dir.join("report.txt"),
            report.to_text(&self.manifest.classes).as_bytes(),
        )?;
        let header = FileHeader::new(PREDICTION_SCHEMA, report.config_fingerprint.clone());
        util::write_jsonl(&dir.join("predictions.jsonl"), &header, predictions)?;
        let mut csv = String::from("sample_id,truth,predicted");
        for l in self.manifest.classes.labels() {
            let _ = write!(csv, ",score_{l}");
        }
        csv.push_str(",route\n");
        for p in predictions {
            let _ = write!(csv, "{},{},{}", p.sample_id, p.truth, p.predicted);
            for s in &p.scores {
                let _ = write!(csv, ",{s}");
            }
            let _ = writeln!(
                csv,
                ",{}",
                p.route.map(|c| c.to_string()).unwrap_or_default()
            );
        }
        util::write_atomic(&dir.join("predictions.csv"), csv.as_bytes())?;
        self.freeze(&dir)
    }

    /// Collects every run report into one table.
    pub fn report(&self) -> Result<Vec<RunReport>> {
        let runs = self.ws.root().join("run");
        require(&runs, "run reports", "run")?;
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(&runs)
            .map_err(|e| Error::io(&runs, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("report.json").exists())
            .collect();
        dirs.sort();
        let reports = dirs
            .iter()
            .map(|d| util::read_json::<RunReport>(&d.join("report.json")))
            .collect::<Result<Vec<_>>>()?;
        let base = reports
            .iter()
            .find(|r| r.method == Method::Base)
            .map(|r| r.macro_f1);
        let mut txt = format!(
            "{:<16} {:>8} {:>9} {:>9} {:>8} {:>7}\n",
            "method", "acc", "macro-F1", "delta", "calls", "budget"
        );
        let mut csv =
            String::from("method,split,samples,accuracy,macro_f1,weighted_f1,calls,overhead_ok\n");
        for r in &reports {
            let delta = base
                .map(|b| format!("{:+.2}", 100.0 * (r.macro_f1 - b)))
                .unwrap_or_default();
            let _ = writeln!(
                txt,
                "{:<16} {:>8.2} {:>9.2} {:>9} {:>8} {:>7}",
                r.name(),
                100.0 * r.accuracy,
                100.0 * r.macro_f1,
                delta,
                r.calls,
                if r.overhead.pass { "ok" } else { "-" }
            );
            let _ = writeln!(
                csv,
                "{},{},{},{:.6},{:.6},{:.6},{},{}",
                r.name(),
                r.split,
                r.samples,
                r.accuracy,
                r.macro_f1,
                r.weighted_f1,
                r.calls,
                r.overhead.pass
            );
        }
        let dir = self.ws.report_dir();
        util::write_atomic(&dir.join("summary.txt"), txt.as_bytes())?;
        util::write_atomic(&dir.join("summary.csv"), csv.as_bytes())?;
        Ok(reports)
    }

    fn store_assets(&mut self, assets: BTreeMap<String, CounterfactualAsset>) -> Result<()> {
        write_assets(&self.assets_path, assets.values())?;
        self.assets = assets;
        Ok(())
    }

    /// Writes masked captions into the counterfactual assets. Samples
    /// where nothing could be masked are marked and later excluded.
    pub fn mask_text(&mut self, annotations: &Path) -> Result<MaskReport> {
        let anns = read_annotations(annotations)?;
        let (masked, report) = mask_corpus(&self.manifest.samples, &anns, DEFAULT_MASK_TOKEN);
        let mut assets = self.assets.clone();
        for m in masked {
            let a = assets
                .entry(m.sample_id.clone())
                .or_insert_with(|| CounterfactualAsset {
                    sample_id: m.sample_id.clone(),
                    ..Default::default()
                });
            a.spurious_text = Some(m.spurious_text);
            a.text_unmasked = m.unmasked;
        }
        self.store_assets(assets)?;
        util::write_json(&self.ws.root().join("mask-text/report.json"), &report)?;
        Ok(report)
    }

    /// Occludes each image where its attention record points and records
    /// the new image in the counterfactual assets.
    pub fn mask_image(
        &mut self,
        attention: &Path,
        params: &CfImageParams,
    ) -> Result<ImageJobReport> {
        let (_, records) = read_attention_file(attention)?;
        let jobs: Vec<(String, PathBuf)> = self
            .manifest
            .samples
            .iter()
            .filter_map(|s| s.image_path.clone().map(|p| (s.id.clone(), p)))
            .collect();
        let report = self
            .pool
            .install(|| generate_for_corpus(&jobs, &records, params));
        let mut assets = self.assets.clone();
        for (id, path) in &report.written {
            assets
                .entry(id.clone())
                .or_insert_with(|| CounterfactualAsset {
                    sample_id: id.clone(),
                    ..Default::default()
                })
                .spurious_image = Some(path.clone());
        }
        self.store_assets(assets)?;
        util::write_json(&self.ws.root().join("mask-image/report.json"), &report)?;
        Ok(report)
    }

    /// Every stage a method needs, then its evaluation. Stages whose
    /// outputs exist are still rerun; the prediction cache makes the
    /// backend part free. With a weights file the search is skipped.
    pub fn end_to_end(
        &self,
        method: Method,
        routing: Routing,
    ) -> Result<(Option<TuneOutcome>, RunOutcome)> {
        self.probe()?;
        self.categorize()?;
        let experts = matches!(method, Method::Ge | Method::MctdEval | Method::MmeJd);
        let router = method.is_routed() && routing == Routing::Router;
        if experts || router {
            self.emit()?;
        }
        if experts {
            self.train_experts()?;
        }
        if router {
            self.train_router()?;
        }
        let tuned = match method {
            Method::Mid | Method::Mrid | Method::MmeJd if self.cfg.weights_file.is_none() => {
                Some(self.tune(method, routing)?)
            }
            _ => None,
        };
        let run = self.run(method, routing)?;
        if let Some(t) = &tuned {
            util::write_json(
                &self.ws.run_dir(&run.report.name()).join("trace.json"),
                &t.traces,
            )?;
        }
        Ok((tuned, run))
    }

    /// Token and tag lift over one split (all samples when `None`).
    pub fn lift(&self, split: Option<Split>, min_support: u64) -> Result<LiftTable> {
        let samples: Vec<&Sample> = match split {
            Some(s) => self.manifest.split_samples(s),
            None => self.manifest.samples.iter().collect(),
        };
        let table = corpus_lift(
            &samples,
            self.k(),
            &FeatureExtractor::new(self.tags.clone()),
            min_support,
        )?;
        let dir = self.ws.root().join("lift");
        util::write_atomic(
            &dir.join("lift.csv"),
            table.to_csv(self.manifest.classes.labels()).as_bytes(),
        )?;
        util::write_json(&dir.join("lift.json"), &table)?;
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic, SyntheticSpec, ANNOTATIONS_FILE, MANIFEST_FILE};

    fn small(dir: &Path) -> RunConfig {
        let spec = SyntheticSpec {
            n_train: 60,
            n_valid: 20,
            n_test: 10,
            ..Default::default()
        };
        generate_synthetic(&spec, &dir.join("data")).unwrap();
        RunConfig {
            dataset: dir.join("data").join(MANIFEST_FILE),
            out: dir.join("out"),
            budget: 12,
            workers: 2,
            ..Default::default()
        }
    }

    #[test]
    fn probe_counts_and_warm_rerun() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let p = Pipeline::new(cfg.clone()).unwrap();
        assert_eq!(p.probe().unwrap().calls, 270);
        drop(p);
        let p = Pipeline::new(cfg).unwrap();
        assert_eq!(p.probe().unwrap().calls, 0);
    }

    #[test]
    fn missing_counterfactual_is_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path());
        let assets_path = dir.path().join("data").join(ASSETS_FILE);
        let mut assets = read_assets(&assets_path).unwrap();
        let first = assets.keys().next().unwrap().clone();
        assets.get_mut(&first).unwrap().spurious_image = None;
        let edited = dir.path().join("assets.jsonl");
        crate::datasets::write_assets(&edited, assets.values()).unwrap();
        cfg.assets = Some(edited);
        let p = Pipeline::new(cfg).unwrap();
        let out = p.probe().unwrap();
        assert_eq!(out.calls, 269);
        assert_eq!(out.flagged().count(), 1);
    }

    #[test]
    fn stages_name_their_producer() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(small(dir.path())).unwrap();
        let e = p.categorize().unwrap_err().to_string();
        assert!(e.contains("`probe`"), "{e}");
        p.probe().unwrap();
        assert!(p.emit().unwrap_err().to_string().contains("`categorize`"));
        let e = p.run(Method::Mid, Routing::Router).unwrap_err();
        assert!(e.to_string().contains("tune --method mid"), "{e}");
        assert_eq!(e.exit_code(), 3);
    }

    #[test]
    fn full_chain_runs() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(small(dir.path())).unwrap();
        p.probe().unwrap();
        p.categorize().unwrap();
        p.emit().unwrap();
        p.train_experts().unwrap();
        p.train_router().unwrap();
        for routing in [Routing::Router, Routing::Oracle] {
            p.tune(Method::MmeJd, routing).unwrap();
            p.tune(Method::Mrid, routing).unwrap();
            p.run(Method::MmeJd, routing).unwrap();
            p.run(Method::Mrid, routing).unwrap();
        }
        p.tune(Method::Mid, Routing::Router).unwrap();
        for m in [Method::Base, Method::Ge, Method::Mid, Method::MctdEval] {
            p.run(m, Routing::Router).unwrap();
        }
        let reports = p.report().unwrap();
        assert_eq!(reports.len(), 8);
        assert!(p.workspace().root().join("report/summary.csv").exists());
        assert!(!p.lift(Some(Split::Train), 2).unwrap().entries.is_empty());
    }

    #[test]
    fn end_to_end_mid_attaches_trace() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(small(dir.path())).unwrap();
        let (tuned, run) = p.end_to_end(Method::Mid, Routing::Router).unwrap();
        assert!(tuned.is_some());
        assert!(p.workspace().run_dir("mid").join("trace.json").exists());
        assert_eq!(run.report.calls, 0, "probe warmed the cache");
    }

    #[test]
    fn mask_text_rebuilds_captions() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path());
        let data = dir.path().join("data");
        let generated = read_assets(&data.join(ASSETS_FILE)).unwrap();
        cfg.assets = Some(dir.path().join("fresh.jsonl"));
        write_assets(cfg.assets.as_ref().unwrap(), std::iter::empty()).unwrap();
        let mut p = Pipeline::new(cfg).unwrap();
        let report = p.mask_text(&data.join(ANNOTATIONS_FILE)).unwrap();
        assert_eq!(report.samples, 90);
        let rebuilt = read_assets(&dir.path().join("fresh.jsonl")).unwrap();
        for (id, a) in &rebuilt {
            assert_eq!(a.spurious_text, generated[id].spurious_text, "{id}");
        }
    }

    #[test]
    fn mask_image_writes_png_next_to_original() {
        use crate::cf_image::{save_png, write_attention_file, AttentionRecord, Grid};
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path());
        let img = dir.path().join("photo.png");
        save_png(
            &img,
            &image::RgbImage::from_pixel(8, 8, image::Rgb([0, 0, 0])),
        )
        .unwrap();
        let manifest = dir.path().join("m.jsonl");
        std::fs::write(
            &manifest,
            "{\"id\":\"a\",\"text\":\"hi\",\"image_path\":\"photo.png\",\"label\":\"class0\"}\n{\"id\":\"b\",\"text\":\"yo\",\"label\":\"class1\"}\n",
        )
        .unwrap();
        cfg.dataset = manifest;
        cfg.model = Some(dir.path().join("data").join(MODEL_FILE));
        cfg.assets = Some(dir.path().join("assets.jsonl"));
        write_assets(cfg.assets.as_ref().unwrap(), std::iter::empty()).unwrap();
        let att = dir.path().join("att.jsonl");
        let grid = Grid::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        write_attention_file(&att, &[AttentionRecord::pooled("a", &grid)]).unwrap();
        let mut p = Pipeline::new(cfg).unwrap();
        let report = p.mask_image(&att, &CfImageParams::default()).unwrap();
        assert_eq!(report.written.len(), 1);
        assert!(dir.path().join("photo.cf_image.png").exists());
        assert!(p.assets()["a"].spurious_image.is_some());
    }
}
