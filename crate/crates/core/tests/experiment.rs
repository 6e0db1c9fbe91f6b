use std::collections::BTreeMap;
use std::path::Path;

use cpgnn::experiment::{
    mean_std, run_experiment, sweep_h, ExperimentSpec, FeatureSource, Method, ResultsTable, SynthSpec,
};
use cpgnn::train::TrainConfig;

fn spec(out: &Path) -> ExperimentSpec {
    ExperimentSpec {
        name: "tiny".into(),
        synth: Some(SynthSpec {
            num_classes: 3,
            class_size: 30,
            n0: 6,
            m: 2,
            h: 0.2,
            features: FeatureSource::Gaussian {
                dim: 8,
                separation: 1.0,
            },
        }),
        methods: Method::ALL.to_vec(),
        train: TrainConfig {
            pretrain_iters: 10,
            max_epochs: 30,
            patience: 10,
            ..TrainConfig::default()
        },
        num_splits: 3,
        output_dir: out.to_path_buf(),
        seed: 42,
        h_values: vec![0.0, 1.0],
        ..ExperimentSpec::default()
    }
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "metadata.json" {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn artifacts_are_deterministic_and_complete() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let t1 = run_experiment(&spec(a.path())).unwrap();
    let t2 = run_experiment(&spec(b.path())).unwrap();
    assert_eq!(serde_json::to_string(&t1).unwrap(), serde_json::to_string(&t2).unwrap());
    let (f1, f2) = (read_tree(a.path()), read_tree(b.path()));
    assert_eq!(f1, f2);
    for name in ["results.json", "results.csv", "summary.csv"] {
        assert!(f1.contains_key(name), "missing {name}");
    }
    assert!(a.path().join("metadata.json").exists());
    assert!(f1.keys().any(|k| k.starts_with("curves")));
    assert!(f1.keys().any(|k| k.starts_with("h_matrices")));
    assert_eq!(t1.runs.len(), 3 * Method::ALL.len());
    assert!(t1.runs.iter().all(|r| r.failure.is_none()));
}

#[test]
fn summary_means_recompute_from_runs() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&spec(dir.path())).unwrap();
    let table: ResultsTable =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("results.json")).unwrap()).unwrap();
    for s in &table.summary {
        let accs: Vec<f64> = table
            .runs
            .iter()
            .filter(|r| r.method == s.method)
            .filter_map(|r| r.test_acc)
            .collect();
        assert_eq!(accs, s.accuracies);
        let (mean, std) = mean_std(&accs);
        assert!((mean - s.mean).abs() < 1e-12);
        assert!((std - s.std).abs() < 1e-12);
    }
}

#[test]
fn sweep_writes_one_directory_per_level() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = spec(dir.path());
    s.methods = vec![Method::CpgnnMlp1, Method::Mlp];
    s.num_splits = 1;
    let tables = sweep_h(&s).unwrap();
    assert_eq!(tables.iter().map(|t| t.0).collect::<Vec<_>>(), vec![0.0, 1.0]);
    assert!(dir.path().join("h_0.00/results.json").exists());
    assert!(dir.path().join("h_1.00/results.json").exists());
    let csv = std::fs::read_to_string(dir.path().join("accuracy_vs_h.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    // Homophily recorded per run follows the requested level.
    let lo = tables[0].1.runs[0].homophily;
    let hi = tables[1].1.runs[0].homophily;
    assert!(lo < 0.2 && hi > 0.8, "{lo} {hi}");
}

#[test]
fn spec_file_needs_exactly_one_source() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.json");
    std::fs::write(&p, r#"{"name": "x"}"#).unwrap();
    assert!(ExperimentSpec::from_file(&p).is_err());
    std::fs::write(&p, r#"{"name": "x", "dataset": "d", "synth": {"num_classes": 2, "class_size": 5, "n0": 3, "m": 1, "h": 0.5, "features": {"kind": "gaussian", "dim": 2, "separation": 1.0}}}"#).unwrap();
    assert!(ExperimentSpec::from_file(&p).is_err());
    std::fs::write(
        &p,
        r#"{"name": "x", "dataset": "d", "methods": ["CPGNN-Cheby-2", "SGC"]}"#,
    )
    .unwrap();
    let s = ExperimentSpec::from_file(&p).unwrap();
    assert_eq!(s.methods, vec![Method::CpgnnCheby2, Method::Sgc]);
}
