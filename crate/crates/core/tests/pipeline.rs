use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mmdebias_core::backend::FeatureExtractor;
use mmdebias_core::datasets::{corpus_lift, generate_synthetic, SyntheticSpec, MANIFEST_FILE};
use mmdebias_core::{Error, Method, Pipeline, Routing, RunConfig, Sample, Split};

fn setup(dir: &Path, spec: &SyntheticSpec) -> RunConfig {
    generate_synthetic(spec, &dir.join("data")).unwrap();
    RunConfig {
        dataset: dir.join("data").join(MANIFEST_FILE),
        out: dir.join("out"),
        budget: 15,
        ..Default::default()
    }
}

#[test]
fn planted_cues_top_the_lift_table() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec::default();
    let p = Pipeline::new(setup(dir.path(), &spec)).unwrap();
    let table = p.lift(Some(Split::Train), 20).unwrap();
    // One text cue family and one background family per class.
    let cues = spec.classes * spec.spurious_vocab * 2;
    for e in &table.entries[..cues] {
        assert!(
            e.feature.starts_with("t:#h") || e.feature.starts_with("i:bg"),
            "{}",
            e.feature
        );
        assert!(
            (1.6..2.0).contains(&e.lift),
            "{} lift {}",
            e.feature,
            e.lift
        );
    }
    for e in &table.entries[cues..cues + 8] {
        assert!(
            e.feature.starts_with("t:s") || e.feature.starts_with("i:obj"),
            "{}",
            e.feature
        );
    }
    assert!(table.entries.windows(2).all(|w| w[0].lift >= w[1].lift));
    assert!(dir.path().join("out/lift/lift.csv").exists());
}

#[test]
fn shuffled_labels_have_unit_lift() {
    let dir = tempfile::tempdir().unwrap();
    let generated = generate_synthetic(&SyntheticSpec::default(), dir.path()).unwrap();
    let mut samples: Vec<Sample> = generated
        .manifest
        .split_samples(Split::Train)
        .into_iter()
        .cloned()
        .collect();
    assert_eq!(samples.len(), 2000);
    let mut labels: Vec<Option<usize>> = samples.iter().map(|s| s.label).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(11));
    for (s, y) in samples.iter_mut().zip(labels) {
        s.label = y;
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let extractor = FeatureExtractor::new(Some(generated.tags));
    let table = corpus_lift(&refs, 2, &extractor, 50).unwrap();
    assert!(!table.entries.is_empty());
    for e in &table.entries {
        assert!(
            (0.9..=1.1).contains(&e.lift),
            "{} lift {}",
            e.feature,
            e.lift
        );
    }
}

#[test]
fn empty_corpus_lift_is_a_data_error() {
    let err = corpus_lift(&[], 2, &FeatureExtractor::default(), 1).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn reruns_reproduce_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        n_train: 120,
        n_valid: 40,
        n_test: 40,
        seed: 5,
        ..Default::default()
    };
    let cfg = setup(dir.path(), &spec);
    let snapshot = || {
        let p = Pipeline::new(cfg.clone()).unwrap();
        p.end_to_end(Method::MmeJd, Routing::Router).unwrap();
        let mut files = BTreeMap::new();
        collect(&dir.path().join("out"), &mut files);
        files
    };
    let first = snapshot();
    let second = snapshot();
    assert!(first.len() > 15, "{:?}", first.keys());
    assert_eq!(
        first.keys().collect::<Vec<_>>(),
        second.keys().collect::<Vec<_>>()
    );
    for (f, a) in &first {
        let name = f.file_name().unwrap().to_string_lossy();
        if name == "report.json" {
            assert_eq!(
                without_calls(a),
                without_calls(&second[f]),
                "{}",
                f.display()
            );
            let warm: serde_json::Value = serde_json::from_slice(&second[f]).unwrap();
            assert_eq!(warm["calls"], 0);
            assert_eq!(warm["overhead"]["pass"], true);
        } else if !(name.starts_with("report.") || name.starts_with("summary.")) {
            assert!(a == &second[f], "{} changed on rerun", f.display());
        }
    }
}

fn without_calls(bytes: &[u8]) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
    let obj = v.as_object_mut().unwrap();
    obj.remove("calls");
    obj.remove("overhead");
    v
}

fn collect(dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect(&path, out);
        } else {
            out.insert(path.clone(), std::fs::read(&path).unwrap());
        }
    }
}

#[test]
fn oracle_routing_follows_label_categories() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        n_train: 120,
        n_valid: 60,
        n_test: 60,
        seed: 8,
        ..Default::default()
    };
    let p = Pipeline::new(setup(dir.path(), &spec)).unwrap();
    p.end_to_end(Method::Mrid, Routing::Oracle).unwrap();
    let cats: BTreeMap<String, _> = p
        .load_categories()
        .unwrap()
        .into_iter()
        .map(|r| (r.sample_id, r.category))
        .collect();
    let run = p.run(Method::Mrid, Routing::Oracle).unwrap();
    for row in &run.predictions {
        let want = match cats.get(&row.sample_id) {
            Some(c) if c.index().is_some() => *c,
            _ => mmdebias_core::DebiasCategory::NoDebias,
        };
        assert_eq!(row.route, Some(want), "{}", row.sample_id);
    }
}
