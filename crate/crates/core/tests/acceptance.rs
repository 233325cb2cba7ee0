//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line with its
//! measurements and wall time, then asserts.
//!
//! Run with `cargo test -p mmdebias-core --test acceptance -- --nocapture`.

use std::path::Path;
use std::time::{Duration, Instant};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mmdebias_core::categorize::{categorize, CategorizationRecord, DebiasCategory};
use mmdebias_core::cf_image::{
    blend, enhance_mask, generate_counterfactual_image, normalize_mask, patch_index, resize_mask,
    save_png, smooth_mask, AlphaMask, AttentionRecord, CfImageParams, Grid, Kernel,
};
use mmdebias_core::cf_text::{mask_phrases, DEFAULT_MASK_TOKEN};
use mmdebias_core::datasets::{
    emit_training_sets, generate_synthetic, reversed_label, ReversedLabelPolicy, SyntheticSpec,
    MANIFEST_FILE,
};
use mmdebias_core::mediation::{
    mid_correct, moe_combine, mrid_correct, ExpertOutputs, ScenarioOutputs, WeightSet,
};
use mmdebias_core::metrics::{
    classification_report, conservative_error_share, f_beta, ConfusionMatrix, Metric,
};
use mmdebias_core::pipeline::{Method, Pipeline, Routing, RunConfig};
use mmdebias_core::tuning::{bayes_optimize, grid_search, SearchSpace};
use mmdebias_core::types::{CounterfactualAsset, ProbVector, Sample};

fn verdict(id: u8, name: &str, pass: bool, elapsed: Duration, limit: Duration, detail: &str) {
    let within = elapsed <= limit;
    let status = if pass && within { "PASS" } else { "FAIL" };
    println!(
        "criterion {id} [{status}] {name}: {detail} ({:.2}s, limit {}s)",
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    assert!(pass, "criterion {id} failed: {detail}");
    assert!(within, "criterion {id} exceeded its time limit");
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn bits(p: &ProbVector) -> Vec<u64> {
    p.scores().iter().map(|v| v.to_bits()).collect()
}

fn pipeline_config(dir: &Path, spec: &SyntheticSpec) -> RunConfig {
    generate_synthetic(spec, &dir.join("data")).unwrap();
    RunConfig {
        dataset: dir.join("data").join(MANIFEST_FILE),
        out: dir.join("out"),
        seed: spec.seed,
        ..Default::default()
    }
}

/// Router confusion matrix with rows as truth, columns as prediction, over
/// none/image/text/both.
const ROUTER_CONFUSION: [[u64; 4]; 4] = [
    [1734, 29, 72, 5],
    [140, 10, 3, 1],
    [230, 3, 36, 1],
    [129, 3, 2, 11],
];

#[test]
fn criterion_1_metric_reproduction() {
    let t = Instant::now();
    let cm = ConfusionMatrix::from_counts(ROUTER_CONFUSION.iter().map(|r| r.to_vec()).collect())
        .unwrap();
    let rep = classification_report(&cm).unwrap();
    let tol = 0.05;
    let pct = |x: f64| 100.0 * x;

    let no_share = pct(cm.col_sum(0) as f64 / cm.total() as f64);
    let mut checks = vec![
        ("no-share", no_share, 92.7),
        ("pred-no count", cm.col_sum(0) as f64, 2233.0),
        ("total", cm.total() as f64, 2409.0),
    ];
    for (i, want) in [94.2, 6.5, 13.3, 7.6].into_iter().enumerate() {
        checks.push(("recall", pct(rep.per_class[i].recall), want));
    }
    for (i, want) in [77.7, 22.2, 31.9, 61.1].into_iter().enumerate() {
        checks.push(("precision", pct(rep.per_class[i].precision), want));
    }
    let (conservative, errors) = conservative_error_share(&cm, 0);
    checks.push(("conservative errors", conservative as f64, 499.0));
    checks.push(("non-reference errors", errors as f64, 512.0));

    let f05 = f_beta(77.55, 96.40, 0.5);
    let mut pass = checks.iter().all(|(_, got, want)| close(*got, *want, tol));
    pass &= close(f05, 80.70, 0.01);
    let worst = checks
        .iter()
        .map(|(_, g, w)| (g - w).abs())
        .fold(0.0, f64::max);
    verdict(
        1,
        "metric reproduction",
        pass,
        t.elapsed(),
        Duration::from_secs(1),
        &format!(
            "{} percentages (max deviation {worst:.3}), conservative {conservative}/{errors}, F-0.5 {f05:.3}",
            checks.len()
        ),
    );
}

#[test]
fn criterion_2_identity_chain() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        n_train: 60,
        n_valid: 20,
        n_test: 50,
        seed: 2,
        ..Default::default()
    };
    let mut cfg = pipeline_config(dir.path(), &spec);

    let base = Pipeline::new(cfg.clone())
        .unwrap()
        .run(Method::Base, Routing::Router)
        .unwrap();
    assert_eq!(base.predictions.len(), 50);

    let zero_file = dir.path().join("zero.json");
    std::fs::write(
        &zero_file,
        serde_json::to_string(&WeightSet::all_zero_per_category()).unwrap(),
    )
    .unwrap();
    cfg.weights_file = Some(zero_file);
    let p = Pipeline::new(cfg).unwrap();
    let mid = p.run(Method::Mid, Routing::Router).unwrap();
    let cmd_identical = base.predictions.iter().zip(&mid.predictions).all(|(a, b)| {
        a.sample_id == b.sample_id
            && a.scores
                .iter()
                .map(|v| v.to_bits())
                .eq(b.scores.iter().map(|v| v.to_bits()))
    });

    let zero = WeightSet::all_zero_per_category();
    let rows = p
        .scenario_rows(
            &p.manifest().split_samples(mmdebias_core::Split::Test),
            "identity",
        )
        .unwrap();
    let mut op_identical = true;
    for r in &rows {
        let s: ScenarioOutputs = r.outputs().unwrap();
        let base_bits = bits(&s.p0);
        op_identical &= bits(&mid_correct(&s, &zero).unwrap()) == base_bits;
        for c in DebiasCategory::ROUTABLE {
            op_identical &= bits(&mrid_correct(&s, c, &zero).unwrap()) == base_bits;
            let ex = ExpertOutputs {
                general: &s.p0,
                image: Some(&s.p_i),
                text: Some(&s.p_t),
            };
            op_identical &= bits(&moe_combine(ex, c, &zero).unwrap()) == base_bits;
        }
    }
    verdict(
        2,
        "identity chain",
        cmd_identical && op_identical && rows.len() == 50,
        t.elapsed(),
        Duration::from_secs(5),
        &format!("{} samples, operators bit-exact: {op_identical}, pipeline mid bit-exact: {cmd_identical}", rows.len()),
    );
}

/// The five criteria on integer hundredths, written from the prose.
fn brute_force_category(p0: i64, pt: i64, pi: i64, e: i64) -> DebiasCategory {
    let text_helps = pt - p0 > e;
    let image_helps = pi - p0 > e;
    let text_hurts = p0 - pt > e;
    let image_hurts = p0 - pi > e;
    match (text_helps, image_helps, text_hurts, image_hurts) {
        (true, true, _, _) => DebiasCategory::NoDebias,
        (true, _, _, true) => DebiasCategory::ImageDebias,
        (_, true, true, _) => DebiasCategory::TextDebias,
        (_, _, true, true) => DebiasCategory::BothDebias,
        _ => DebiasCategory::Exclude,
    }
}

#[test]
fn criterion_3_categorizer_oracle() {
    let t = Instant::now();
    let mut cases = 0usize;
    let mut agree = 0usize;
    for (e_int, e) in [(0i64, 0.0), (5, 0.05), (10, 0.1)] {
        for a in 0..=20i64 {
            for b in 0..=20i64 {
                for c in 0..=20i64 {
                    let (p0, pt, pi) = (a as f64 * 0.05, b as f64 * 0.05, c as f64 * 0.05);
                    let got = categorize(p0.min(1.0), pt.min(1.0), pi.min(1.0), e).unwrap();
                    cases += 1;
                    agree += usize::from(got == brute_force_category(5 * a, 5 * b, 5 * c, e_int));
                }
            }
        }
    }
    verdict(
        3,
        "categorizer oracle equivalence",
        cases == 9261 * 3 && agree == cases,
        t.elapsed(),
        Duration::from_secs(10),
        &format!("{agree}/{cases} cases agree"),
    );
}

fn noise_image(rng: &mut ChaCha8Rng, w: u32, h: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |_, _| {
        image::Rgb([rng.random(), rng.random(), rng.random()])
    })
}

fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Grid {
    Grid::new(
        h,
        w,
        (0..h * w).map(|_| rng.random::<f64>() * 5.0).collect(),
    )
    .unwrap()
}

fn png_bytes(dir: &Path, name: &str, img: &RgbImage) -> Vec<u8> {
    let p = dir.join(name);
    save_png(&p, img).unwrap();
    std::fs::read(p).unwrap()
}

#[test]
fn criterion_4_image_pipeline_properties() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = noise_image(&mut rng, 512, 512);
    let mut notes = Vec::new();

    let zero = AlphaMask::new(Grid::filled(512, 512, 0.0), "zero").unwrap();
    let zero_ok = png_bytes(
        dir.path(),
        "a.png",
        &blend(&img, &zero, [128, 128, 128]).unwrap(),
    ) == png_bytes(dir.path(), "b.png", &img);
    let flat = AttentionRecord::pooled("flat", &Grid::filled(32, 32, 0.7));
    let (flat_out, _) = generate_counterfactual_image(
        &image::DynamicImage::ImageRgb8(img.clone()),
        &flat,
        &CfImageParams::default(),
    )
    .unwrap();
    let zero_ok = zero_ok && flat_out == img;
    notes.push(format!("zero mask identical: {zero_ok}"));

    let full = AlphaMask::new(Grid::filled(512, 512, 1.0), "full").unwrap();
    let fill = [17, 200, 99];
    let full_ok = blend(&img, &full, fill)
        .unwrap()
        .pixels()
        .all(|p| p.0 == fill);
    notes.push(format!("full mask uniform: {full_ok}"));

    let mut bijective = true;
    for h in 1..=64usize {
        for w in 1..=64usize {
            let mut seen = vec![false; h * w + 1];
            for i in 1..=h {
                for j in 1..=w {
                    let idx = patch_index(i, j, w).unwrap();
                    bijective &= (1..=h * w).contains(&idx) && !seen[idx];
                    if idx <= h * w {
                        seen[idx] = true;
                    }
                }
            }
        }
    }
    notes.push(format!("patch index bijective: {bijective}"));

    let mut unit = true;
    let kernel = Kernel::gaussian(3, 1.0).unwrap();
    for _ in 0..4 {
        let g = random_grid(&mut rng, 32, 32);
        let n = normalize_mask(&g).unwrap();
        let e = enhance_mask(&n, 1.5).unwrap();
        let s = smooth_mask(&e, &kernel).unwrap();
        let r = resize_mask(&s, 512, 512).unwrap();
        unit &= [&n, &e, &s, &r].iter().all(|g| g.in_unit_range());
    }
    notes.push(format!("stages in [0,1]: {unit}"));

    let att = AttentionRecord::pooled(
        "seeded",
        &random_grid(&mut ChaCha8Rng::seed_from_u64(44), 32, 32),
    );
    let src = image::DynamicImage::ImageRgb8(img);
    let run = |name: &str| {
        let (out, _) =
            generate_counterfactual_image(&src, &att, &CfImageParams::default()).unwrap();
        png_bytes(dir.path(), name, &out)
    };
    let rerun_ok = run("r1.png") == run("r2.png");
    notes.push(format!("rerun byte-identical: {rerun_ok}"));

    verdict(
        4,
        "counterfactual image pipeline",
        zero_ok && full_ok && bijective && unit && rerun_ok,
        t.elapsed(),
        Duration::from_secs(30),
        &notes.join(", "),
    );
}

#[test]
fn criterion_5_optimizer() {
    let t = Instant::now();
    let objective = |x: &[f64]| Ok(1.0 - (x[0] - 0.3).powi(2) - (x[1] - 0.7).powi(2));
    let oracle_space =
        SearchSpace::new(vec![("alpha", 0.0, 1.0), ("beta", 0.0, 1.0)], 201 * 201).unwrap();
    let oracle = grid_search(objective, &oracle_space, 201).unwrap().best;
    let space = SearchSpace::new(vec![("alpha", 0.0, 1.0), ("beta", 0.0, 1.0)], 50).unwrap();
    let mut hits = 0;
    let mut worst: f64 = 0.0;
    let mut max_evals = 0;
    for seed in 0..5u64 {
        let trace = bayes_optimize(objective, &space, seed).unwrap();
        let dist = trace
            .best
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(dist);
        max_evals = max_evals.max(trace.points.len());
        hits += usize::from(dist <= 0.05 && trace.points.len() <= 50);
    }
    verdict(
        5,
        "optimizer correctness",
        hits == 5,
        t.elapsed(),
        Duration::from_secs(20),
        &format!(
            "{hits}/5 seeds within 0.05 of grid optimum ({:.3}, {:.3}); worst L-inf {worst:.4}; max {max_evals} evaluations",
            oracle[0], oracle[1]
        ),
    );
}

#[test]
fn criterion_6_end_to_end_synthetic() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        n_train: 2000,
        n_valid: 500,
        n_test: 500,
        rho_train: 0.8,
        rho_test: -0.8,
        seed: 6,
        ..Default::default()
    };
    let cfg = RunConfig {
        metric: Some(Metric::MacroF1),
        ..pipeline_config(dir.path(), &spec)
    };
    let p = Pipeline::new(cfg).unwrap();
    p.probe().unwrap();
    p.categorize().unwrap();
    p.emit().unwrap();
    p.train_experts().unwrap();
    p.train_router().unwrap();
    p.tune(Method::Mid, Routing::Router).unwrap();
    p.tune(Method::MmeJd, Routing::Router).unwrap();
    p.tune(Method::MmeJd, Routing::Oracle).unwrap();
    let f1 = |m, r| 100.0 * p.run(m, r).unwrap().report.macro_f1;
    let base = f1(Method::Base, Routing::Router);
    let mid = f1(Method::Mid, Routing::Router);
    let ge = f1(Method::Ge, Routing::Router);
    let trained = f1(Method::MmeJd, Routing::Router);
    let oracle = f1(Method::MmeJd, Routing::Oracle);
    let tol = -0.5;
    let pass = mid - base >= 5.0 && oracle - trained >= tol && trained - ge >= tol;
    verdict(
        6,
        "end-to-end synthetic debiasing",
        pass,
        t.elapsed(),
        Duration::from_secs(120),
        &format!(
            "macro-F1 base {base:.2}, mid {mid:.2} ({:+.2}); mme-jd oracle {oracle:.2} >= trained {trained:.2} >= ge {ge:.2}",
            mid - base
        ),
    );
}

#[test]
fn criterion_7_overhead_accounting() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        n_train: 300,
        n_valid: 100,
        n_test: 100,
        seed: 7,
        ..Default::default()
    };
    let cfg = pipeline_config(dir.path(), &spec);
    {
        let p = Pipeline::new(RunConfig {
            budget: 10,
            ..cfg.clone()
        })
        .unwrap();
        p.probe().unwrap();
        p.categorize().unwrap();
        p.emit().unwrap();
        p.train_experts().unwrap();
        p.train_router().unwrap();
        p.tune(Method::Mid, Routing::Router).unwrap();
        p.tune(Method::MmeJd, Routing::Router).unwrap();
    }
    let cold = RunConfig {
        cache: false,
        ..cfg
    };
    let calls = |m: Method| {
        let p = Pipeline::new(cold.clone()).unwrap();
        let r = p.run(m, Routing::Router).unwrap().report;
        assert_eq!(r.samples, 100);
        r.calls
    };
    let base = calls(Method::Base);
    let mid = calls(Method::Mid);
    let mctd = calls(Method::MctdEval);
    let moe = calls(Method::MmeJd);
    let pass = base == 100 && mid == 300 && mctd == 100 && (100..=300).contains(&moe);
    verdict(
        7,
        "overhead accounting",
        pass,
        t.elapsed(),
        Duration::from_secs(30),
        &format!("backend calls on 100 samples: base {base}, mid {mid}, mctd {mctd}, mme-jd {moe}"),
    );
}

const FUZZ_VOCAB: [&str; 14] = [
    "nothing",
    "says",
    "equality",
    "like",
    "discrimination",
    "Love",
    "love",
    "#love",
    "the",
    "[MASK]",
    "great",
    "day",
    "so",
    "it's",
];

#[test]
fn criterion_8_counterfactual_text() {
    let t = Instant::now();
    let figure = mask_phrases(
        "nothing says equality like discrimination",
        &["equality", "discrimination"],
        DEFAULT_MASK_TOKEN,
    )
    .text;
    let figure_ok = figure == "nothing says [MASK] like [MASK]";

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut idempotent = 0;
    let mut preserved = 0;
    let cases = 1000;
    for _ in 0..cases {
        let pick = |rng: &mut ChaCha8Rng| FUZZ_VOCAB[rng.random_range(0..FUZZ_VOCAB.len())];
        let words: Vec<&str> = (0..rng.random_range(0..16))
            .map(|_| pick(&mut rng))
            .collect();
        let sep = if rng.random_bool(0.2) { ", " } else { " " };
        let text = words.join(sep);
        let phrases: Vec<String> = (0..rng.random_range(0..4))
            .map(|_| {
                (0..rng.random_range(1..3))
                    .map(|_| pick(&mut rng))
                    .filter(|w| *w != "[MASK]")
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let once = mask_phrases(&text, &phrases, DEFAULT_MASK_TOKEN);
        let twice = mask_phrases(&once.text, &phrases, DEFAULT_MASK_TOKEN);
        idempotent += usize::from(once.text == twice.text);

        let mut kept = String::new();
        let mut cur = 0;
        for r in &once.spans {
            kept.push_str(&text[cur..r.start]);
            kept.push(' ');
            cur = r.end;
        }
        kept.push_str(&text[cur..]);
        let kept = kept.replace(DEFAULT_MASK_TOKEN, " ");
        let outside: Vec<&str> = kept.split_whitespace().collect();
        let stripped = once.text.replace(DEFAULT_MASK_TOKEN, " ");
        let survived: Vec<&str> = stripped.split_whitespace().collect();
        let masks = once.text.matches(DEFAULT_MASK_TOKEN).count()
            - text.matches(DEFAULT_MASK_TOKEN).count();
        preserved += usize::from(outside == survived && masks == once.spans.len());
    }
    verdict(
        8,
        "counterfactual text fidelity",
        figure_ok && idempotent == cases && preserved == cases,
        t.elapsed(),
        Duration::from_secs(5),
        &format!("figure example `{figure}`; idempotent {idempotent}/{cases}; tokens preserved {preserved}/{cases}"),
    );
}

#[test]
fn criterion_9_emission_counts() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let all = [
        DebiasCategory::NoDebias,
        DebiasCategory::ImageDebias,
        DebiasCategory::TextDebias,
        DebiasCategory::BothDebias,
        DebiasCategory::Exclude,
    ];
    let mut identities = 0;
    let fixtures = 20;
    for f in 0..fixtures {
        let n = rng.random_range(5..60);
        let samples: Vec<Sample> = (0..n)
            .map(|i| {
                Sample::new(
                    format!("f{f}s{i}"),
                    format!("caption {i}"),
                    Some(format!("img/{i}.png").into()),
                    Some(rng.random_range(0..2)),
                )
                .unwrap()
            })
            .collect();
        let cats: Vec<CategorizationRecord> = samples
            .iter()
            .map(|s| CategorizationRecord {
                sample_id: s.id.clone(),
                p0_y: 0.5,
                pt_y: 0.5,
                pi_y: 0.5,
                epsilon: 0.1,
                category: all[rng.random_range(0..all.len())],
            })
            .collect();
        let assets = samples
            .iter()
            .map(|s| {
                (
                    s.id.clone(),
                    CounterfactualAsset {
                        sample_id: s.id.clone(),
                        spurious_text: Some("[MASK] caption".into()),
                        spurious_image: Some(format!("img/{}.cf_image.png", s.id).into()),
                        ..Default::default()
                    },
                )
            })
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let sets = emit_training_sets(
            &refs,
            2,
            &cats,
            &assets,
            &Default::default(),
            ReversedLabelPolicy::LeastLikely,
        )
        .unwrap();
        let count =
            |pred: fn(DebiasCategory) -> bool| cats.iter().filter(|c| pred(c.category)).count();
        let n13 = count(|c| matches!(c, DebiasCategory::ImageDebias | DebiasCategory::BothDebias));
        let n23 = count(|c| matches!(c, DebiasCategory::TextDebias | DebiasCategory::BothDebias));
        let ok = sets.ge.records.len() == n
            && sets.ide.records.len() == sets.ge.records.len() + n13
            && sets.tde.records.len() == sets.ge.records.len() + n23;
        identities += usize::from(ok);
    }
    let mut reversed_ok = true;
    for y in 0..2 {
        for seed in 0..50 {
            for policy in [
                ReversedLabelPolicy::LeastLikely,
                ReversedLabelPolicy::SeededUniform(seed),
            ] {
                reversed_ok &= reversed_label(y, 2, None, policy).unwrap() == 1 - y;
            }
        }
    }
    verdict(
        9,
        "emission counting identities",
        identities == fixtures && reversed_ok,
        t.elapsed(),
        Duration::from_secs(5),
        &format!("{identities}/{fixtures} fixtures satisfy both identities; K=2 reversal is 1-y: {reversed_ok}"),
    );
}
