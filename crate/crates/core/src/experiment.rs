//! Multi-run experiments: dataset preparation, per-method training, result
//! aggregation, and deterministic artifact export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_path, write_file, LabeledDataset};
use crate::error::{Error, Result};
use crate::estimator::{glorot_init, EstimatorConfig, EstimatorKind, PriorEstimator};
use crate::features::Features;
use crate::graph::empirical_compatibility;
use crate::propagation::PropagationConfig;
use crate::rng::{derive_seed, rng_from_seed};
use crate::synth::{generate, transfer_features, ReferenceFeatures, SynthConfig};
use crate::train::{make_splits, rows_of, train_baseline, train_full, BaselineModel, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "CPGNN-MLP-1")]
    CpgnnMlp1,
    #[serde(rename = "CPGNN-MLP-2")]
    CpgnnMlp2,
    #[serde(rename = "CPGNN-Cheby-1")]
    CpgnnCheby1,
    #[serde(rename = "CPGNN-Cheby-2")]
    CpgnnCheby2,
    #[serde(rename = "MLP")]
    Mlp,
    #[serde(rename = "GCN-Cheby")]
    GcnCheby,
    #[serde(rename = "SGC")]
    Sgc,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::CpgnnMlp1,
        Method::CpgnnMlp2,
        Method::CpgnnCheby1,
        Method::CpgnnCheby2,
        Method::Mlp,
        Method::GcnCheby,
        Method::Sgc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::CpgnnMlp1 => "CPGNN-MLP-1",
            Method::CpgnnMlp2 => "CPGNN-MLP-2",
            Method::CpgnnCheby1 => "CPGNN-Cheby-1",
            Method::CpgnnCheby2 => "CPGNN-Cheby-2",
            Method::Mlp => "MLP",
            Method::GcnCheby => "GCN-Cheby",
            Method::Sgc => "SGC",
        }
    }

    /// Estimator kind and propagation depth for the propagating variants.
    pub fn cpgnn_variant(self) -> Option<(EstimatorKind, usize)> {
        match self {
            Method::CpgnnMlp1 => Some((EstimatorKind::Mlp, 1)),
            Method::CpgnnMlp2 => Some((EstimatorKind::Mlp, 2)),
            Method::CpgnnCheby1 => Some((EstimatorKind::Cheby, 1)),
            Method::CpgnnCheby2 => Some((EstimatorKind::Cheby, 2)),
            _ => None,
        }
    }
}

/// Where synthetic node features come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureSource {
    /// Class-conditional Gaussian pools standing in for a real reference graph.
    Gaussian { dim: usize, separation: f64 },
    /// Pools taken from a labeled dataset on disk (directory or prefix).
    Reference { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub class_size: usize,
    pub n0: usize,
    pub m: usize,
    pub h: f64,
    pub features: FeatureSource,
}

impl SynthSpec {
    pub fn config(&self, h: f64, seed: u64) -> Result<SynthConfig> {
        SynthConfig::balanced(self.num_classes, self.class_size, self.n0, self.m, h, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub name: String,
    /// Dataset directory or file prefix.
    pub dataset: Option<PathBuf>,
    pub synth: Option<SynthSpec>,
    pub methods: Vec<Method>,
    /// Hidden sizes, dropout, Chebyshev order; the kind is set per method.
    pub estimator: EstimatorConfig,
    /// Activation and echo cancellation; the depth is set per method.
    pub propagation: PropagationConfig,
    pub train: TrainConfig,
    /// Splits on a fixed dataset, or graph instances for a synthetic one.
    pub num_splits: usize,
    pub train_frac: f64,
    pub val_frac: f64,
    pub featureless: bool,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Homophily levels visited by a sweep.
    pub h_values: Vec<f64>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            dataset: None,
            synth: None,
            methods: Method::ALL.to_vec(),
            estimator: EstimatorConfig::default(),
            propagation: PropagationConfig::default(),
            train: TrainConfig::default(),
            num_splits: 10,
            train_frac: 0.1,
            val_frac: 0.1,
            featureless: false,
            output_dir: PathBuf::from("results"),
            seed: 0,
            h_values: (0..=10).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

impl ExperimentSpec {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = crate::dataset::read_file(path.as_ref())?;
        let spec: Self = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.is_some() == self.synth.is_some() {
            return Err(Error::Input(
                "exactly one of `dataset` and `synth` must be given".into(),
            ));
        }
        if self.num_splits == 0 {
            return Err(Error::Input("num_splits must be positive".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Input("no methods selected".into()));
        }
        self.estimator.validate()?;
        self.train.validate()
    }
}

/// One prepared run: a dataset instance plus its split seed.
struct PreparedRun {
    dataset: LabeledDataset,
    splits: crate::train::Splits,
    train_seed: u64,
    empirical_h: Array2<f64>,
    homophily: f64,
}

fn prepare_runs(spec: &ExperimentSpec, h: Option<f64>) -> Result<Vec<PreparedRun>> {
    let base = match &spec.dataset {
        Some(path) => Some(load_path(path, spec.featureless)?),
        None => None,
    };
    let reference = match spec.synth.as_ref().map(|s| &s.features) {
        Some(FeatureSource::Reference { path }) => {
            let r = load_path(path, false)?;
            Some(ReferenceFeatures::from_labeled(&r.features.to_dense(), &r.labels)?)
        }
        _ => None,
    };
    (0..spec.num_splits)
        .into_par_iter()
        .map(|run| {
            let run_seed = derive_seed(spec.seed, run as u64);
            let dataset = match (&base, &spec.synth) {
                (Some(ds), _) => ds.clone(),
                (None, Some(s)) => synth_instance(s, h.unwrap_or(s.h), run_seed, reference.as_ref(), spec.featureless)?,
                (None, None) => unreachable!("validated"),
            };
            let splits = make_splits(
                dataset.labels.labels(),
                dataset.num_classes(),
                spec.train_frac,
                spec.val_frac,
                derive_seed(run_seed, 2),
            )?;
            let empirical_h = empirical_compatibility(&dataset.graph, &dataset.labels)?;
            let homophily = crate::graph::homophily_ratio(&dataset.graph, &dataset.labels)?;
            Ok(PreparedRun {
                dataset,
                splits,
                train_seed: derive_seed(run_seed, 3),
                empirical_h,
                homophily,
            })
        })
        .collect()
}

/// Generates one synthetic instance with transferred features.
pub fn synth_instance(
    s: &SynthSpec,
    h: f64,
    seed: u64,
    reference: Option<&ReferenceFeatures>,
    featureless: bool,
) -> Result<LabeledDataset> {
    let cfg = s.config(h, derive_seed(seed, 0))?;
    let (graph, labels) = generate(&cfg)?;
    let features = if featureless {
        Features::identity(graph.num_nodes())
    } else {
        let owned;
        let reference = match (reference, &s.features) {
            (Some(r), _) => r,
            (None, FeatureSource::Gaussian { dim, separation }) => {
                owned = ReferenceFeatures::gaussian(&labels.class_sizes(), *dim, *separation, derive_seed(seed, 1))?;
                &owned
            }
            (None, FeatureSource::Reference { .. }) => {
                return Err(Error::Input("reference features were not loaded".into()))
            }
        };
        Features::dense(transfer_features(&labels, reference, derive_seed(seed, 4))?)
    };
    LabeledDataset::new(format!("synth-h{h}"), graph, labels, features)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub run: usize,
    pub homophily: f64,
    pub test_acc: Option<f64>,
    pub val_acc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    /// Test accuracy of every successful run, in run order.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
    pub failures: usize,
}

impl MethodSummary {
    pub fn from_values(method: Method, accuracies: Vec<f64>, failures: usize) -> Self {
        let (mean, std) = mean_std(&accuracies);
        Self {
            method,
            accuracies,
            mean,
            std,
            failures,
        }
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultsTable {
    pub name: String,
    pub runs: Vec<RunRecord>,
    pub summary: Vec<MethodSummary>,
}

impl ResultsTable {
    pub fn summary_for(&self, method: Method) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method)
    }
}

/// Everything one (run, method) job produced.
pub struct JobOutput {
    pub record: RunRecord,
    pub report: Option<TrainReport>,
    pub empirical_h: Array2<f64>,
    pub baseline_val_curve: Option<Vec<f64>>,
}

/// Test accuracy, best validation accuracy, best epoch, CPGNN report,
/// baseline validation curve.
type JobResult = (f64, f64, usize, Option<TrainReport>, Option<Vec<f64>>);

fn run_job(spec: &ExperimentSpec, prepared: &PreparedRun, run: usize, method: Method) -> JobOutput {
    let train_cfg = TrainConfig {
        seed: prepared.train_seed,
        ..spec.train.clone()
    };
    let ds = &prepared.dataset;
    let result: Result<JobResult> = (|| {
        if let Some((kind, layers)) = method.cpgnn_variant() {
            let est_cfg = EstimatorConfig {
                kind,
                ..spec.estimator.clone()
            };
            let prop_cfg = PropagationConfig {
                num_layers: layers,
                ..spec.propagation.clone()
            };
            let (report, _) = train_full(
                ds,
                &prepared.splits,
                &est_cfg,
                &prop_cfg,
                &train_cfg,
                Some(&prepared.empirical_h),
            )?;
            Ok((
                report.test_acc,
                report.best_val_acc,
                report.best_epoch,
                Some(report),
                None,
            ))
        } else {
            let mut rng = rng_from_seed(derive_seed(train_cfg.seed, 0));
            let (f, k) = (ds.features.dim(), ds.num_classes());
            let model = match method {
                Method::Sgc => BaselineModel::SimplifiedGcn(glorot_init(f, k, &mut rng)),
                Method::GcnCheby => BaselineModel::Estimator(PriorEstimator::new(
                    EstimatorConfig {
                        kind: EstimatorKind::Cheby,
                        ..spec.estimator.clone()
                    },
                    f,
                    k,
                    &mut rng,
                )?),
                _ => BaselineModel::Estimator(PriorEstimator::new(
                    EstimatorConfig {
                        kind: EstimatorKind::Mlp,
                        ..spec.estimator.clone()
                    },
                    f,
                    k,
                    &mut rng,
                )?),
            };
            let (report, _) = train_baseline(ds, &prepared.splits, model, &train_cfg)?;
            Ok((
                report.test_acc,
                report.best_val_acc,
                report.best_epoch,
                None,
                Some(report.val_acc),
            ))
        }
    })();
    let (record, report, curve) = match result {
        Ok((test, val, epoch, report, curve)) => (
            RunRecord {
                method,
                run,
                homophily: prepared.homophily,
                test_acc: Some(test),
                val_acc: Some(val),
                best_epoch: Some(epoch),
                failure: None,
            },
            report,
            curve,
        ),
        Err(e) => (
            RunRecord {
                method,
                run,
                homophily: prepared.homophily,
                test_acc: None,
                val_acc: None,
                best_epoch: None,
                failure: Some(e.to_string()),
            },
            None,
            None,
        ),
    };
    JobOutput {
        record,
        report,
        empirical_h: prepared.empirical_h.clone(),
        baseline_val_curve: curve,
    }
}

/// Worker count from `CPGNN_THREADS`, else rayon's default.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var("CPGNN_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
    {
        builder = builder.num_threads(n.max(1));
    }
    builder
        .build()
        .map_err(|e| Error::Input(format!("cannot start worker pool: {e}")))
}

/// Runs every method on every split (or synthetic instance) without
/// writing anything.
pub fn run_jobs(spec: &ExperimentSpec, h: Option<f64>) -> Result<Vec<JobOutput>> {
    spec.validate()?;
    let pool = thread_pool()?;
    pool.install(|| {
        let prepared = prepare_runs(spec, h)?;
        let jobs: Vec<(usize, Method)> = (0..spec.num_splits)
            .flat_map(|r| spec.methods.iter().map(move |&m| (r, m)))
            .collect();
        Ok(jobs
            .into_par_iter()
            .map(|(run, method)| run_job(spec, &prepared[run], run, method))
            .collect())
    })
}

pub fn tabulate(name: &str, methods: &[Method], outputs: &[JobOutput]) -> ResultsTable {
    let runs: Vec<RunRecord> = outputs.iter().map(|o| o.record.clone()).collect();
    let summary = methods
        .iter()
        .map(|&m| {
            let mine: Vec<&RunRecord> = runs.iter().filter(|r| r.method == m).collect();
            let accs = mine.iter().filter_map(|r| r.test_acc).collect();
            let failures = mine.iter().filter(|r| r.failure.is_some()).count();
            MethodSummary::from_values(m, accs, failures)
        })
        .collect();
    ResultsTable {
        name: name.to_string(),
        runs,
        summary,
    }
}

#[derive(Debug, Serialize)]
struct Metadata {
    name: String,
    started_unix_secs: u64,
    wall_clock_secs: f64,
    threads: usize,
}

/// Runs the experiment and writes its artifacts under `spec.output_dir`.
///
/// Everything except `metadata.json` is a deterministic function of the spec.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ResultsTable> {
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let clock = Instant::now();
    let outputs = run_jobs(spec, None)?;
    let table = tabulate(&spec.name, &spec.methods, &outputs);
    write_artifacts(&spec.output_dir, &table, &outputs)?;
    write_metadata(&spec.output_dir, &spec.name, started, clock)?;
    Ok(table)
}

/// One experiment per homophily level in `spec.h_values`, each written to
/// `h_<value>/`, plus `accuracy_vs_h.csv` with one row per level and method.
pub fn sweep_h(spec: &ExperimentSpec) -> Result<Vec<(f64, ResultsTable)>> {
    if spec.synth.is_none() {
        return Err(Error::Input("a homophily sweep needs a `synth` section".into()));
    }
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let clock = Instant::now();
    let mut tables = Vec::new();
    let mut csv = String::from("method,h,mean,std,n,failures\n");
    for &h in &spec.h_values {
        let outputs = run_jobs(spec, Some(h))?;
        let table = tabulate(&format!("{}-h{h}", spec.name), &spec.methods, &outputs);
        write_artifacts(&spec.output_dir.join(format!("h_{h:.2}")), &table, &outputs)?;
        tables.push((h, table));
    }
    for &m in &spec.methods {
        for (h, table) in &tables {
            let s = table.summary_for(m).expect("every method is summarized");
            writeln!(
                csv,
                "{},{h},{},{},{},{}",
                m.name(),
                s.mean,
                s.std,
                s.accuracies.len(),
                s.failures
            )
            .unwrap();
        }
    }
    write_file(&spec.output_dir.join("accuracy_vs_h.csv"), &csv)?;
    write_metadata(&spec.output_dir, &spec.name, started, clock)?;
    Ok(tables)
}

fn write_metadata(dir: &Path, name: &str, started: u64, clock: Instant) -> Result<()> {
    let meta = Metadata {
        name: name.to_string(),
        started_unix_secs: started,
        wall_clock_secs: clock.elapsed().as_secs_f64(),
        threads: rayon::current_num_threads(),
    };
    write_file(&dir.join("metadata.json"), &serde_json::to_string_pretty(&meta)?)
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_artifacts(dir: &Path, table: &ResultsTable, outputs: &[JobOutput]) -> Result<()> {
    for sub in ["", "curves", "h_matrices", "reports"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    write_file(&dir.join("results.json"), &serde_json::to_string_pretty(table)?)?;

    let mut csv = String::from("method,run,homophily,test_acc,val_acc,best_epoch,status\n");
    for r in &table.runs {
        let status = r
            .failure
            .as_deref()
            .map_or("ok".to_string(), |f| format!("\"failed: {}\"", f.replace('"', "'")));
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.method.name(),
            r.run,
            r.homophily,
            opt(r.test_acc),
            opt(r.val_acc),
            opt(r.best_epoch),
            status
        )
        .unwrap();
    }
    write_file(&dir.join("results.csv"), &csv)?;

    let mut summary = String::from("method,mean,std,n,failures\n");
    for s in &table.summary {
        writeln!(
            summary,
            "{},{},{},{},{}",
            s.method.name(),
            s.mean,
            s.std,
            s.accuracies.len(),
            s.failures
        )
        .unwrap();
    }
    write_file(&dir.join("summary.csv"), &summary)?;

    for o in outputs {
        let stem = format!("{}_run{}", o.record.method.name(), o.record.run);
        if let Some(report) = &o.report {
            let mut c = String::from("epoch,total,ce_final,cotrain,phi,val_acc,test_acc,h_error\n");
            for e in &report.epochs {
                writeln!(
                    c,
                    "{},{},{},{},{},{},{},{}",
                    e.epoch,
                    e.total,
                    e.ce_final,
                    e.cotrain,
                    e.phi,
                    e.val_acc,
                    e.test_acc,
                    opt(e.h_error)
                )
                .unwrap();
            }
            write_file(&dir.join("curves").join(format!("{stem}.csv")), &c)?;
            let mats = serde_json::json!({
                "empirical": rows_of(&o.empirical_h),
                "initial": report.initial_h,
                "final": report.final_h,
                "initial_error": report.initial_h_error,
                "final_error": report.final_h_error,
            });
            write_file(
                &dir.join("h_matrices").join(format!("{stem}.json")),
                &serde_json::to_string_pretty(&mats)?,
            )?;
            write_file(
                &dir.join("reports").join(format!("{stem}.json")),
                &serde_json::to_string_pretty(report)?,
            )?;
        }
        if let Some(curve) = &o.baseline_val_curve {
            let mut c = String::from("epoch,val_acc\n");
            for (i, v) in curve.iter().enumerate() {
                writeln!(c, "{i},{v}").unwrap();
            }
            write_file(&dir.join("curves").join(format!("{stem}.csv")), &c)?;
        }
    }
    Ok(())
}
