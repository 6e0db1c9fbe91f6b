use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use cpgnn::dataset::{load_path, LabeledDataset};
use cpgnn::experiment::{run_experiment, sweep_h, ExperimentSpec, ResultsTable};
use cpgnn::features::Features;
use cpgnn::graph::{empirical_compatibility, homophily_ratio};
use cpgnn::rng::derive_seed;
use cpgnn::synth::{generate, make_target_compat, transfer_features, ReferenceFeatures, SynthConfig};
use cpgnn::theorem::{check_instance, random_instance};
use cpgnn::Error;

/// Max belief difference allowed by `theorem-check`.
const THEOREM_TOLERANCE: f64 = 1e-9;

#[derive(Parser)]
#[command(version, about = "Compatibility-guided GNN experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic graph with a target compatibility matrix
    Gen(GenArgs),
    /// Run an experiment spec
    Run {
        spec: PathBuf,
        /// Override the spec's output directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print dataset statistics
    Stats {
        /// Dataset directory or file prefix
        dataset: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Compare one-layer identity propagation against the simplified GCN
    TheoremCheck {
        /// Maximum node count of the random instances
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Run a spec once per homophily level in `h_values`
    SweepH {
        spec: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct GenArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 1000)]
    class_size: usize,
    #[arg(long, default_value_t = 70)]
    n0: usize,
    #[arg(long, default_value_t = 6)]
    m: usize,
    /// Diagonal of the target compatibility matrix
    #[arg(long, conflicts_with = "compat_file")]
    h: Option<f64>,
    /// Target compatibility matrix as CSV rows
    #[arg(long)]
    compat_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_prefix: PathBuf,
    /// Labeled dataset supplying per-class feature pools
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Gaussian surrogate dimension when no reference is given
    #[arg(long, default_value_t = 100)]
    feature_dim: usize,
    #[arg(long, default_value_t = 1.6)]
    separation: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(
            Error::Divergence { .. }
            | Error::NonFinite { .. }
            | Error::SinkhornConvergence { .. }
            | Error::SinkhornSupport(_),
        ) => 2,
        _ => 1,
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::Gen(args) => gen(args).map(|_| ExitCode::SUCCESS),
        Command::Run { spec, out } => {
            let spec = load_spec(&spec, out)?;
            let table = run_experiment(&spec)?;
            Ok(report_table(&table))
        }
        Command::SweepH { spec, out } => {
            let spec = load_spec(&spec, out)?;
            let tables = sweep_h(&spec)?;
            let mut code = ExitCode::SUCCESS;
            for (h, table) in &tables {
                println!("h = {h}");
                if report_table(table) != ExitCode::SUCCESS {
                    code = ExitCode::from(2);
                }
            }
            Ok(code)
        }
        Command::Stats { dataset, json } => {
            let ds = load_path(&dataset, false)?;
            let stats = ds.stats()?;
            if json {
                println!("{}", serde_json::to_string_pretty(&stats)?);
            } else {
                println!("nodes      {}", stats.nodes);
                println!("edges      {}", stats.edges);
                println!("classes    {}", stats.classes);
                println!("features   {}", stats.feature_dim);
                println!("homophily  {:.4}", stats.homophily);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::TheoremCheck { n, seed, instances } => {
            if n < 2 {
                bail!(Error::Input("--n must be at least 2".into()));
            }
            let mut worst: f64 = 0.0;
            for i in 0..instances {
                let s = derive_seed(seed, i as u64);
                let nodes = 2 + (s % (n as u64 - 1)) as usize;
                let classes = 2 + (s >> 8) as usize % 4;
                let dim = 1 + (s >> 16) as usize % 8;
                let inst = random_instance(nodes, classes, dim, 0.2, s)?;
                let r = check_instance(&inst)?;
                println!(
                    "instance {i:2}: n={:3} edges={:4} classes={} max|diff|={:.3e}",
                    r.nodes, r.edges, r.classes, r.max_abs_diff
                );
                worst = worst.max(r.max_abs_diff);
            }
            println!("max |diff| = {worst:.3e} (tolerance {THEOREM_TOLERANCE:e})");
            Ok(if worst < THEOREM_TOLERANCE {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(3)
            })
        }
    }
}

fn load_spec(path: &Path, out: Option<PathBuf>) -> anyhow::Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::from_file(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(out) = out {
        spec.output_dir = out;
    }
    Ok(spec)
}

/// Prints the summary; nonzero when any run failed.
fn report_table(table: &ResultsTable) -> ExitCode {
    let mut failed = false;
    for s in &table.summary {
        println!(
            "{:<14} {:6.2} ± {:5.2}  ({} runs, {} failed)",
            s.method.name(),
            100.0 * s.mean,
            100.0 * s.std,
            s.accuracies.len(),
            s.failures
        );
        failed |= s.failures > 0;
    }
    for r in table.runs.iter().filter(|r| r.failure.is_some()) {
        eprintln!(
            "{} run {}: {}",
            r.method.name(),
            r.run,
            r.failure.as_deref().unwrap_or("")
        );
    }
    if failed {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    }
}

fn read_compat_csv(path: &Path) -> anyhow::Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| {
                    anyhow::Error::new(Error::Parse {
                        path: path.display().to_string(),
                        line: i + 1,
                        msg: "expected comma-separated numbers".into(),
                    })
                })
        })
        .collect()
}

fn gen(args: GenArgs) -> anyhow::Result<()> {
    let compat = match (&args.compat_file, args.h) {
        (Some(path), _) => read_compat_csv(path)?,
        (None, Some(h)) => make_target_compat(args.classes, h)?
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect(),
        (None, None) => bail!(Error::Input("give --h or --compat-file".into())),
    };
    let cfg = SynthConfig {
        class_sizes: vec![args.class_size; compat.len()],
        n0: args.n0,
        m: args.m,
        compat,
        seed: args.seed,
    };
    let (graph, labels) = generate(&cfg)?;
    let reference = match &args.reference {
        Some(path) => {
            let r = load_path(path, false)?;
            ReferenceFeatures::from_labeled(&r.features.to_dense(), &r.labels)?
        }
        None => ReferenceFeatures::gaussian(
            &labels.class_sizes(),
            args.feature_dim,
            args.separation,
            derive_seed(args.seed, 100),
        )?,
    };
    let x = transfer_features(&labels, &reference, derive_seed(args.seed, 101))?;
    let measured_h = homophily_ratio(&graph, &labels)?;
    let measured_compat = empirical_compatibility(&graph, &labels)?;
    let ds = LabeledDataset::new("synthetic", graph, labels, Features::dense(x))?;
    let paths = ds.save(&args.out_prefix)?;

    let meta = serde_json::json!({
        "config": cfg,
        "nodes": ds.num_nodes(),
        "edges": ds.graph.num_edges(),
        "measured_homophily": measured_h,
        "measured_compatibility": measured_compat.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
        "surrogate_features": reference.surrogate,
    });
    let meta_path = format!("{}.meta.json", args.out_prefix.display());
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).with_context(|| format!("writing {meta_path}"))?;
    println!(
        "wrote {} ({} nodes, {} edges, h = {:.4})",
        paths.edges.display(),
        ds.num_nodes(),
        ds.graph.num_edges(),
        measured_h
    );
    Ok(())
}
