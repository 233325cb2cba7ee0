//! `mmdebias` command-line tool: one subcommand per pipeline stage.
//!
//! Exit codes: 0 success, 1 data error, 2 backend error, 3 configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mmdebias_core::cf_image::CfImageParams;
use mmdebias_core::datasets::{generate_synthetic, SyntheticSpec, MANIFEST_FILE};
use mmdebias_core::metrics::Metric;
use mmdebias_core::pipeline::{BackendKind, Method, Pipeline, RunConfig, RunReport};
use mmdebias_core::{util, Error, Result, Split};

#[derive(Parser, Debug)]
#[command(
    name = "mmdebias",
    version,
    about = "Causal-mediation debiasing for multimodal classifiers"
)]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a planted-bias synthetic dataset.
    Generate(GenerateArgs),
    /// Build counterfactual captions from semantic annotations.
    MaskText {
        #[command(flatten)]
        common: Common,
        /// Annotation lines or raw extractor responses.
        #[arg(long)]
        annotations: PathBuf,
    },
    /// Build counterfactual images from attention records.
    MaskImage {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        attention: PathBuf,
        #[arg(long, default_value_t = 1.5)]
        enhance: f64,
        #[arg(long, default_value_t = 3)]
        kernel_size: usize,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
    },
    /// Cache original, text-spurious and image-spurious outputs.
    Probe(Common),
    /// Assign a debias category to every labelled sample.
    Categorize(Common),
    /// Write expert and router training sets.
    Emit(Common),
    /// Train the general, debiasing and counterfactual-trained experts.
    TrainExperts(Common),
    /// Train the routing classifier.
    TrainRouter(Common),
    /// Search debias weights on the tuning split.
    Tune {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: MethodArg,
    },
    /// Evaluate one method on the evaluation split.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: MethodArg,
    },
    /// Run every stage a method needs, then evaluate it.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: MethodArg,
    },
    /// Token and image-tag lift scores.
    Lift {
        #[command(flatten)]
        common: Common,
        /// Restrict to one split.
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        #[arg(long, default_value_t = 5)]
        min_support: u64,
    },
    /// Summarize every run report in the output directory.
    Report(Common),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Target directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 500)]
    n_valid: usize,
    #[arg(long, default_value_t = 500)]
    n_test: usize,
    #[arg(long, default_value_t = 0.8, allow_hyphen_values = true)]
    rho_train: f64,
    #[arg(long, allow_hyphen_values = true)]
    rho_valid: Option<f64>,
    #[arg(long, default_value_t = -0.8, allow_hyphen_values = true)]
    rho_test: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Full generator spec as JSON; flags above are ignored when given.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Resolved configuration to start from (a `config.json` from an earlier run).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Objective evaluations per weight search.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Route with label-derived categories instead of the trained router.
    #[arg(long)]
    oracle_router: bool,
    /// Use these weights instead of tuned ones.
    #[arg(long)]
    weights_file: Option<PathBuf>,
    /// Counterfactual assets file.
    #[arg(long)]
    assets: Option<PathBuf>,
    /// Image tag table.
    #[arg(long)]
    tags: Option<PathBuf>,
    /// Synthetic model file.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Remote endpoint base URL.
    #[arg(long)]
    endpoint: Option<String>,
    /// Remote model name.
    #[arg(long)]
    remote_model: Option<String>,
    /// Comma-separated answer tokens, one per class.
    #[arg(long, value_delimiter = ',')]
    verbalizers: Option<Vec<String>>,
    /// Serve remote calls from a recorded exchange file.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Record remote exchanges to this file.
    #[arg(long)]
    record: Option<PathBuf>,
    #[arg(long)]
    prompt_version: Option<String>,
    /// Tuning metric: accuracy, macro-f1, weighted-f1 or f1.
    #[arg(long)]
    metric: Option<String>,
    /// Disable the persistent prediction cache.
    #[arg(long)]
    no_cache: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackendArg {
    Synthetic,
    Remote,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Base,
    Ge,
    Mid,
    Mrid,
    #[value(alias = "mctd")]
    MctdEval,
    MmeJd,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Base => Method::Base,
            MethodArg::Ge => Method::Ge,
            MethodArg::Mid => Method::Mid,
            MethodArg::Mrid => Method::Mrid,
            MethodArg::MctdEval => Method::MctdEval,
            MethodArg::MmeJd => Method::MmeJd,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg: RunConfig = match &self.config {
            Some(p) => util::read_json(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    cfg.$field = v.clone();
                }
            )*};
        }
        set!(dataset, epsilon, budget, seed, workers, out);
        macro_rules! set_opt {
            ($($field:ident),*) => {$(
                if self.$field.is_some() {
                    cfg.$field = self.$field.clone();
                }
            )*};
        }
        set_opt!(
            weights_file,
            assets,
            tags,
            model,
            replay,
            record,
            prompt_version
        );
        if let Some(b) = self.backend {
            cfg.backend = match b {
                BackendArg::Synthetic => BackendKind::Synthetic,
                BackendArg::Remote => BackendKind::Remote,
            };
        }
        if let Some(e) = &self.endpoint {
            cfg.remote.base_url = e.clone();
        }
        if let Some(m) = &self.remote_model {
            cfg.remote.model = m.clone();
        }
        if let Some(v) = &self.verbalizers {
            cfg.remote.verbalizers = v.clone();
        }
        if let Some(m) = &self.metric {
            cfg.metric = Some(Metric::parse(m)?);
        }
        cfg.oracle_router |= self.oracle_router;
        cfg.cache &= !self.no_cache;
        Ok(cfg)
    }

    fn pipeline(&self) -> Result<Pipeline> {
        Pipeline::new(self.resolve()?)
    }
}

fn print_ledger(p: &Pipeline) {
    let snapshot = p.ledger().snapshot();
    println!("backend calls: {}", snapshot.values().sum::<u64>());
    for (scope, calls) in snapshot {
        println!("backend calls [{scope}]: {calls}");
    }
}

fn print_run(p: &Pipeline, r: &RunReport) {
    print!("{}", r.to_text(&p.manifest().classes));
    println!("report: {}", p.workspace().run_dir(&r.name()).display());
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => {
            let spec = match &a.spec {
                Some(p) => util::read_json(p)?,
                None => SyntheticSpec {
                    classes: a.classes,
                    n_train: a.n_train,
                    n_valid: a.n_valid,
                    n_test: a.n_test,
                    rho_train: a.rho_train,
                    rho_valid: a.rho_valid,
                    rho_test: a.rho_test,
                    seed: a.seed,
                    ..Default::default()
                },
            };
            let ds = generate_synthetic(&spec, &a.out)?;
            println!(
                "wrote {} samples to {}",
                ds.manifest.len(),
                a.out.join(MANIFEST_FILE).display()
            );
            for (class, n) in ds.manifest.class_counts(None) {
                println!("  {class}: {n}");
            }
        }
        Command::MaskText {
            common,
            annotations,
        } => {
            let mut p = common.pipeline()?;
            let r = p.mask_text(&annotations)?;
            println!(
                "masked {} captions; {} of {} phrases not found; {} left unmasked; {} without annotation",
                r.samples,
                r.missed_phrases,
                r.phrases,
                r.unmasked.len(),
                r.without_annotation.len()
            );
        }
        Command::MaskImage {
            common,
            attention,
            enhance,
            kernel_size,
            sigma,
        } => {
            let mut p = common.pipeline()?;
            let params = CfImageParams {
                enhance,
                kernel_size,
                sigma,
                ..Default::default()
            };
            let r = p.mask_image(&attention, &params)?;
            println!(
                "wrote {} counterfactual images; {} failed",
                r.written.len(),
                r.failures.len()
            );
            for (id, e) in &r.failures {
                log::warn!("{id}: {e}");
            }
        }
        Command::Probe(common) => {
            let p = common.pipeline()?;
            let out = p.probe()?;
            println!(
                "probed {} samples; {} flagged",
                out.rows.len(),
                out.flagged().count()
            );
            for r in out.flagged() {
                log::info!("{}: {}", r.sample_id, r.flags.join(", "));
            }
            print_ledger(&p);
        }
        Command::Categorize(common) => {
            let p = common.pipeline()?;
            let out = p.categorize()?;
            println!("categorized {} samples", out.summary.total);
            for (c, n) in &out.summary.counts {
                println!("  {c}: {n} ({:.1}%)", out.summary.percentages[c]);
            }
        }
        Command::Emit(common) => {
            let p = common.pipeline()?;
            let s = p.emit()?;
            println!(
                "ge {} | ide {} | tde {} | mctd {} | router {} | skipped {}",
                s.ge.records.len(),
                s.ide.records.len(),
                s.tde.records.len(),
                s.mctd.records.len(),
                s.router.records.len(),
                s.skipped.len()
            );
        }
        Command::TrainExperts(common) => {
            let p = common.pipeline()?;
            for e in p.train_experts()? {
                println!(
                    "trained {} expert: {}",
                    e.role(),
                    p.workspace().expert(e.role()).display()
                );
            }
        }
        Command::TrainRouter(common) => {
            let p = common.pipeline()?;
            let (_, eval) = p.train_router()?;
            println!("router: {}", p.workspace().router_model().display());
            if let Some(e) = eval {
                println!(
                    "mean F-0.5 over debias classes: {:.2}",
                    100.0 * e.mean_debias_f05
                );
            }
        }
        Command::Tune { common, method } => {
            let p = common.pipeline()?;
            let routing = p.config().routing();
            let t = p.tune(method.into(), routing)?;
            println!(
                "{}: alpha={:.4} beta={:.4} after {} evaluations on {} samples",
                Method::from(method).artifact_name(routing),
                t.weights.alpha,
                t.weights.beta,
                t.evaluations,
                t.samples
            );
            for (c, w) in &t.weights.per_category {
                println!("  c={c}: alpha={:.4} beta={:.4}", w.alpha, w.beta);
            }
        }
        Command::Run { common, method } => {
            let p = common.pipeline()?;
            let out = p.run(method.into(), p.config().routing())?;
            print_run(&p, &out.report);
        }
        Command::Pipeline { common, method } => {
            let p = common.pipeline()?;
            let (_, out) = p.end_to_end(method.into(), p.config().routing())?;
            print_run(&p, &out.report);
            print_ledger(&p);
        }
        Command::Lift {
            common,
            split,
            min_support,
        } => {
            let p = common.pipeline()?;
            let table = p.lift(split.map(Into::into), min_support)?;
            for e in table.entries.iter().take(20) {
                println!(
                    "{:<24} {:<10} lift {:.3} (joint {}, support {})",
                    e.feature,
                    p.manifest().classes.label(e.label).unwrap_or("?"),
                    e.lift,
                    e.joint,
                    e.support
                );
            }
            println!(
                "{} rows: {}",
                table.entries.len(),
                p.workspace().root().join("lift/lift.csv").display()
            );
        }
        Command::Report(common) => {
            let p = common.pipeline()?;
            let reports = p.report()?;
            let summary = p.workspace().report_dir().join("summary.txt");
            print!(
                "{}",
                std::fs::read_to_string(&summary).map_err(|e| Error::io(&summary, e))?
            );
            println!("{} runs", reports.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
