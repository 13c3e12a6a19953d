//! Command-line driver: builds concept datasets from keypoint annotations,
//! trains and evaluates concept models on cached activations, and writes
//! similarity, size-bias and plot-data reports.

pub mod config;
pub mod dataset;
pub mod error;
pub mod fixture;
pub mod plot;
pub mod report;
pub mod study;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use concept_embed::maskgen::Concept;
use log::error;

use crate::config::{CategoryFilter, ExperimentSpec, KernelMode, Overrides};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "concept-embed", version, about = "Concept embedding and size-bias studies on cached activations")]
struct Cli {
    /// Increase log detail (-v info, -vv debug). RUST_LOG takes precedence.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Rasterize concept masks and write size tables.
    BuildDataset(CommonArgs),
    /// Estimate and categorize person sizes only.
    EstimateSizes(CommonArgs),
    /// Cross-validated training for every configured combination.
    Train(CommonArgs),
    /// Evaluate trained fold models on their held-out images.
    Evaluate(CommonArgs),
    /// Concept similarity matrices and size-category comparisons.
    Similarity(CommonArgs),
    /// The full study: dataset, training, evaluation and similarity reports.
    #[command(alias = "run")]
    SizeBias(CommonArgs),
    /// Convert a report tree into plot-ready series.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Experiment spec (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    /// Restrict to these concepts (repeatable).
    #[arg(long)]
    concept: Vec<String>,
    /// Restrict to these layers (repeatable).
    #[arg(long)]
    layer: Vec<String>,
    /// Restrict to these size categories (repeatable).
    #[arg(long)]
    category: Vec<String>,
    /// Restrict to these kernel modes (repeatable).
    #[arg(long)]
    kernel_mode: Vec<String>,
}

#[derive(Debug, Args)]
struct PlotArgs {
    /// Report directory; defaults to the config's output directory.
    #[arg(long, required_unless_present = "config")]
    reports: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults to `<reports>/plots`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_all<T>(values: &[String], parse: impl Fn(&str) -> CliResult<T>) -> CliResult<Vec<T>> {
    values.iter().map(|v| parse(v)).collect()
}

impl CommonArgs {
    fn spec(&self) -> CliResult<ExperimentSpec> {
        let mut spec = ExperimentSpec::load(&self.config)?;
        let overrides = Overrides {
            output_dir: self.out.clone(),
            seed: self.seed,
            epochs: self.epochs,
            learning_rate: self.lr,
            batch_size: self.batch_size,
            folds: self.folds,
            concepts: parse_all(&self.concept, |s| s.parse::<Concept>().map_err(Into::into))?,
            layers: self.layer.clone(),
            categories: parse_all(&self.category, str::parse::<CategoryFilter>)?,
            kernel_modes: parse_all(&self.kernel_mode, str::parse::<KernelMode>)?,
        };
        overrides.apply(&mut spec)?;
        Ok(spec)
    }
}

fn execute(command: Command) -> CliResult<()> {
    use crate::study::*;
    match command {
        Command::BuildDataset(a) => {
            let spec = a.spec()?;
            prepare_dataset(&spec)?;
        }
        Command::EstimateSizes(a) => {
            let spec = a.spec()?;
            let (annotations, _) = dataset::read_annotations(&spec.annotations)?;
            let persons = dataset::estimate_sizes(&annotations, spec.target_side)?;
            dataset::write_sizes_csv(&persons, &spec.output_dir.join("sizes.csv"))?;
        }
        Command::Train(a) => {
            let spec = a.spec()?;
            let layers = open_layers(&spec)?;
            let index = prepare_dataset(&spec)?;
            train_groups(&spec, &index, &layers)?;
        }
        Command::Evaluate(a) => {
            let spec = a.spec()?;
            let layers = open_layers(&spec)?;
            let index = prepare_dataset(&spec)?;
            let groups = load_groups(&spec, &layers)?;
            evaluate_groups(&spec, &index, &layers, &groups)?;
        }
        Command::Similarity(a) => {
            let spec = a.spec()?;
            let layers = open_layers(&spec)?;
            let groups = load_groups(&spec, &layers)?;
            similarity_study(&spec, &layers, &groups)?;
        }
        Command::SizeBias(a) => {
            cmd_run(&a.spec()?)?;
        }
        Command::Plot(a) => {
            let reports = match (&a.reports, &a.config) {
                (Some(r), _) => r.clone(),
                (None, Some(c)) => ExperimentSpec::load(c)?.output_dir,
                (None, None) => return Err(CliError::Usage("--reports or --config is required".into())),
            };
            let out = a.out.clone().unwrap_or_else(|| reports.join("plots"));
            for path in plot::cmd_plot(&reports, &out)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
