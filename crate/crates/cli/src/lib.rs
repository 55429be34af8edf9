//! Command-line driver: data generation, training, evaluation, tables,
//! robustness scans, verification suites and reproducibility reruns.

pub mod check;
pub mod commands;
pub mod config;
pub mod manifest;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use inferno::inference::SGrid;

use config::{parse_grid, DataFormat, Overrides, Preset, Settings};
use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "inferno", version, about = "Inverse-Fisher summary statistics on a synthetic mixture")]
pub struct Cli {
    /// Worker threads; defaults to INFERNO_THREADS, then to all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Suppress progress and result lines; files and manifests are unchanged.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write train, validation and evaluation sets.
    Generate {
        #[command(flatten)]
        settings: SettingsArgs,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train one network and write the model and its trace.
    Train {
        #[command(flatten)]
        settings: SettingsArgs,
        /// Directory holding train and valid files.
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = LossArg::Inferno)]
        loss: LossArg,
        /// Benchmark the inverse-Fisher loss is built for.
        #[arg(long, default_value_t = 2)]
        benchmark: u8,
        #[arg(long, default_value = "models")]
        out: PathBuf,
    },
    /// Profile-likelihood intervals of one statistic.
    Evaluate {
        #[command(flatten)]
        settings: SettingsArgs,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Single benchmark; overrides --benchmarks.
        #[arg(long)]
        benchmark: Option<u8>,
        /// Trained model; omit with --optimal.
        #[arg(long, required_unless_present = "optimal", conflicts_with = "optimal")]
        model: Option<PathBuf>,
        /// Use the density-ratio statistic instead of a model.
        #[arg(long)]
        optimal: bool,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Width table over seeds and benchmarks; trains missing models.
    Table {
        #[command(flatten)]
        settings: SettingsArgs,
        /// Data directory; generated there if the files are missing.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Model directory; defaults to OUT/models.
        #[arg(long)]
        models: Option<PathBuf>,
        /// Benchmarks to train inverse-Fisher models for (default: all columns).
        #[arg(long, value_delimiter = ',')]
        inferno: Option<Vec<u8>>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Width as the true r or λ moves away from the training point.
    Scan {
        #[command(flatten)]
        settings: SettingsArgs,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
        #[arg(long, default_value_t = 2)]
        benchmark: u8,
        #[arg(long, value_enum, default_value_t = ScanParam::Both)]
        param: ScanParam,
        /// Values to scan; defaults to the preset's list for the parameter.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Run verification suites; exits with status 4 on failure.
    Check {
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
        /// Random cases for the gradient suite.
        #[arg(long, default_value_t = 100)]
        cases: usize,
        /// Random points per sample for the sufficiency suite.
        #[arg(long, default_value_t = 10_000)]
        points: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Re-execute a recorded run and compare output digests.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Inferno,
    /// Cross-entropy classifier.
    #[value(name = "xent", alias = "classifier")]
    Classifier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScanParam {
    R,
    Lambda,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Sufficiency,
    Gradients,
    Stationarity,
    Softhard,
    Fisher,
    All,
}

/// Preset, optional JSON config file and flag overrides; flags win.
#[derive(Debug, Default, Args)]
pub struct SettingsArgs {
    /// JSON file with any subset of the settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub valid_size: Option<usize>,
    #[arg(long)]
    pub eval_size: Option<usize>,
    #[arg(long, value_enum)]
    pub format: Option<DataFormat>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub inferno_learning_rate: Option<f64>,
    #[arg(long)]
    pub inferno_batch_size: Option<usize>,
    #[arg(long)]
    pub classifier_learning_rate: Option<f64>,
    #[arg(long)]
    pub classifier_batch_size: Option<usize>,
    /// Model seeds per table row.
    #[arg(long)]
    pub seeds: Option<u64>,
    /// Benchmark columns, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub benchmarks: Option<Vec<u8>>,
    /// Signal grid as lo:hi:step.
    #[arg(long, value_parser = parse_grid)]
    pub grid: Option<SGrid>,
    #[arg(long)]
    pub analytic_samples: Option<usize>,
}

impl SettingsArgs {
    pub fn resolve(&self) -> Result<Settings, CliError> {
        let file = match &self.config {
            Some(path) if !path.exists() => return Err(CliError::MissingInput(format!("config {}", path.display()))),
            Some(path) => Overrides::load(path)?,
            None => Overrides::default(),
        };
        let flags = Overrides {
            preset: self.preset,
            seed: self.seed,
            train_size: self.train_size,
            valid_size: self.valid_size,
            eval_size: self.eval_size,
            format: self.format,
            epochs: self.epochs,
            inferno_learning_rate: self.inferno_learning_rate,
            inferno_batch_size: self.inferno_batch_size,
            classifier_learning_rate: self.classifier_learning_rate,
            classifier_batch_size: self.classifier_batch_size,
            seeds: self.seeds,
            benchmarks: self.benchmarks.clone(),
            grid: self.grid,
            analytic_samples: self.analytic_samples,
            ..Default::default()
        };
        Ok(file.merge(flags).resolve())
    }
}

/// Failure with its process exit status.
#[derive(Debug)]
pub enum CliError {
    /// A required input file or directory does not exist (status 2).
    MissingInput(String),
    /// Training diverged (status 3).
    Diverged(String),
    /// A verification or reproducibility check failed (status 4).
    Verification(String),
    /// Anything else (status 1).
    Other(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::MissingInput(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Verification(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::MissingInput(what) => write!(f, "missing input: {what}"),
            CliError::Diverged(msg) => write!(f, "{msg}"),
            CliError::Verification(msg) => write!(f, "verification failed: {msg}"),
            CliError::Other(e) => write!(f, "{e:#}"),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Other(e.into())
    }
}

/// Parse `args` (without the program name) and run the command.
pub fn run_args<I, S>(args: I) -> Result<RunManifest, CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let args: Vec<String> = args.into_iter().map(Into::into).collect();
    run(parse_args(&args)?, args)
}

pub fn parse_args(args: &[String]) -> Result<Cli, CliError> {
    Cli::try_parse_from(std::iter::once("inferno").chain(args.iter().map(String::as_str)))
        .map_err(|e| CliError::Other(anyhow::anyhow!(e.to_string())))
}

/// Run a parsed command; `args` is recorded in the manifest for reruns.
pub fn run(cli: Cli, args: Vec<String>) -> Result<RunManifest, CliError> {
    configure_threads(cli.threads);
    commands::set_quiet(cli.quiet);
    commands::dispatch(cli.command, args)
}

fn configure_threads(requested: Option<usize>) {
    #[cfg(feature = "parallel")]
    {
        let from_env = std::env::var("INFERNO_THREADS").ok().and_then(|v| v.parse::<usize>().ok());
        if let Some(n) = requested.or(from_env).filter(|&n| n > 0) {
            // the global pool can only be set once per process
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = requested;
}
