use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use image::{DynamicImage, Rgb, RgbImage};

use mmdebias_core::categorize::categorize;
use mmdebias_core::cf_image::{
    generate_counterfactual_image, AttentionRecord, CfImageParams, Grid,
};
use mmdebias_core::cf_text::{mask_phrases, DEFAULT_MASK_TOKEN};
use mmdebias_core::datasets::{generate_synthetic, SyntheticSpec, MANIFEST_FILE};
use mmdebias_core::mediation::{mid_correct, ScenarioOutputs, WeightSet};
use mmdebias_core::pipeline::{Pipeline, RunConfig};
use mmdebias_core::tuning::{bayes_optimize, SearchSpace};
use mmdebias_core::types::ProbVector;

fn correction(c: &mut Criterion) {
    let rows: Vec<ScenarioOutputs> = (0..10_000)
        .map(|i| {
            let a = (i % 97) as f64 / 97.0;
            let p = |x: f64| ProbVector::probabilities(vec![x, 1.0 - x]).unwrap();
            ScenarioOutputs::new(p(a), p(1.0 - a), p(a * 0.5)).unwrap()
        })
        .collect();
    let w = WeightSet::global(0.4, 0.6);
    c.bench_function("mid_correct/10k", |b| {
        b.iter(|| {
            rows.iter().for_each(|s| {
                black_box(mid_correct(black_box(s), &w).unwrap());
            })
        })
    });
    c.bench_function("categorize/grid", |b| {
        b.iter(|| {
            let mut n = 0;
            for a in 0..=20 {
                for t in 0..=20 {
                    for i in 0..=20 {
                        let r = categorize(a as f64 / 20.0, t as f64 / 20.0, i as f64 / 20.0, 0.1)
                            .unwrap();
                        n += r.index().unwrap_or(4);
                    }
                }
            }
            n
        })
    });
}

fn counterfactuals(c: &mut Criterion) {
    let mut group = c.benchmark_group("counterfactual_image");
    for side in [128u32, 512] {
        let img = DynamicImage::ImageRgb8(RgbImage::from_fn(side, side, |x, y| {
            Rgb([x as u8, y as u8, (x ^ y) as u8])
        }));
        let grid = Grid::new(24, 24, (0..576).map(|i| ((i * 37) % 101) as f64).collect()).unwrap();
        let rec = AttentionRecord::pooled("bench", &grid);
        let params = CfImageParams::default();
        group.bench_with_input(BenchmarkId::from_parameter(side), &img, |b, img| {
            b.iter(|| generate_counterfactual_image(img, &rec, &params).unwrap())
        });
    }
    group.finish();

    let text =
        "nothing says equality like discrimination on a lovely monday morning #blessed".repeat(8);
    let phrases = ["equality", "discrimination", "lovely monday"];
    c.bench_function("mask_phrases", |b| {
        b.iter(|| mask_phrases(black_box(&text), &phrases, DEFAULT_MASK_TOKEN))
    });
}

fn search(c: &mut Criterion) {
    let space = SearchSpace::new(vec![("alpha", 0.0, 1.0), ("beta", 0.0, 1.0)], 30).unwrap();
    c.bench_function("bayes_optimize/30", |b| {
        b.iter(|| {
            bayes_optimize(
                |x| Ok(1.0 - (x[0] - 0.3).powi(2) - (x[1] - 0.7).powi(2)),
                &space,
                1,
            )
            .unwrap()
        })
    });
}

fn probe(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        n_train: 400,
        n_valid: 100,
        n_test: 100,
        ..Default::default()
    };
    generate_synthetic(&spec, dir.path()).unwrap();
    let cfg = RunConfig {
        dataset: dir.path().join(MANIFEST_FILE),
        out: dir.path().join("out"),
        cache: false,
        ..Default::default()
    };
    let p = Pipeline::new(cfg).unwrap();
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    group.bench_function("probe/600-cold", |b| b.iter(|| p.probe().unwrap()));
    group.finish();
}

criterion_group!(benches, correction, counterfactuals, search, probe);
criterion_main!(benches);
