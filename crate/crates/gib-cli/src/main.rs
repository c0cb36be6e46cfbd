//! Batch experiment driver for graph transmission runs.
//!
//! Exit codes: 0 success, 2 spec/argument validation, 3 runtime failure.

use clap::{Parser, Subcommand};
use gib_cli::runner::{ablation_matrix, plot_from_csv, run_experiment, RunError};
use gib_cli::spec::ExperimentSpec;
use gib_core::dataset::{generate_synthetic, write_tudataset};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "gib", version, about = "Task-oriented graph transmission experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Parser, Debug, Default, Clone)]
struct Overrides {
    /// Output root directory (default: $GIB_OUTPUT_ROOT or `.`)
    #[arg(long)]
    output_root: Option<PathBuf>,
    /// Override the experiment output subdirectory
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Record measured wall time in metrics.csv (off keeps reruns
    /// byte-identical)
    #[arg(long)]
    record_timing: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a spec (or manifest) file
    Run {
        spec: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the ablation variants a spec selects, with shared folds/seeds
    Ablate {
        spec: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Regenerate a figure from an existing metrics.csv
    Plot {
        metrics: PathBuf,
        /// Output SVG path (default: metrics path with .svg)
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Generate a synthetic corpus in the flat-file layout
    GenSynthetic {
        out_dir: PathBuf,
        /// Number of graphs (even, at least 20)
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Dataset name prefix for the files
        #[arg(long, default_value = "SYNTHETIC")]
        name: String,
    },
}

fn apply_overrides(spec: &mut ExperimentSpec, o: &Overrides) {
    if let Some(dir) = &o.output_dir {
        spec.output_dir = Some(dir.clone());
    }
    if let Some(v) = o.epochs {
        spec.epochs = v;
    }
    if let Some(v) = o.folds {
        spec.folds = v;
    }
    if let Some(v) = o.seed {
        spec.seed = v;
    }
    if let Some(v) = o.beta {
        spec.beta = v;
    }
    if let Some(v) = o.alpha {
        spec.alpha = v;
    }
    if let Some(v) = o.hidden_dim {
        spec.hidden_dim = v;
    }
    if let Some(v) = o.batch_size {
        spec.batch_size = v;
    }
    if let Some(v) = o.workers {
        spec.workers = Some(v);
    }
    if o.record_timing {
        spec.record_timing = true;
    }
}

fn load_spec(path: &std::path::Path, overrides: &Overrides) -> Result<ExperimentSpec, RunError> {
    let mut spec = ExperimentSpec::from_file(path)?;
    apply_overrides(&mut spec, overrides);
    Ok(spec)
}

fn run() -> Result<(), RunError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { spec, overrides } => {
            let spec = load_spec(&spec, &overrides)?;
            let artifacts = run_experiment(&spec, overrides.output_root.as_deref())?;
            eprintln!(
                "wrote {} records to {}",
                artifacts.records.len(),
                artifacts.output_dir.display()
            );
        }
        Command::Ablate { spec, overrides } => {
            let spec = load_spec(&spec, &overrides)?;
            let artifacts = ablation_matrix(&spec, overrides.output_root.as_deref())?;
            eprintln!(
                "wrote {} records and tables to {}",
                artifacts.records.len(),
                artifacts.output_dir.display()
            );
        }
        Command::Plot { metrics, output } => {
            let out = plot_from_csv(&metrics, output.as_deref())?;
            eprintln!("wrote {}", out.display());
        }
        Command::GenSynthetic { out_dir, n, seed, name } => {
            let corpus = generate_synthetic(n, seed).map_err(RunError::Dataset)?;
            write_tudataset(&corpus, &out_dir, &name).map_err(RunError::Dataset)?;
            eprintln!(
                "wrote {} graphs ({} classes) under {}",
                corpus.graphs.len(),
                corpus.class_n,
                out_dir.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
