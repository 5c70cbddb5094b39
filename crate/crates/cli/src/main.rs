//! `survfuse` command-line interface.

mod commands;
mod settings;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use settings::{ModelOpts, RunConfig, SynthOpts};

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    /// Invalid usage, configuration or input data: exit code 2.
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<survfuse::Error> for CliError {
    fn from(e: survfuse::Error) -> Self {
        match e {
            survfuse::Error::Io(_) | survfuse::Error::Numeric(_) => CliError::internal(e.to_string()),
            _ => CliError::usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::internal(format!("I/O error: {e}"))
    }
}

#[derive(Debug, Parser)]
#[command(name = "survfuse", version, about = "Multimodal survival prediction on token cohorts")]
struct Cli {
    /// Key-value TOML file with defaults for any flag; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Default, Args)]
struct Common {
    #[arg(long)]
    seed: Option<u64>,
    /// Output file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
struct Inputs {
    /// Cohort JSON file.
    #[arg(long)]
    cohort: Option<PathBuf>,
    /// Checkpoint JSON file.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort and bin its event times.
    Synth {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        synth: SynthOpts,
        #[arg(long)]
        n_bins: Option<usize>,
    },
    /// Train on a whole cohort and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        model: ModelOpts,
        /// Per-epoch loss history CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// K-fold cross-validation; writes per-fold metrics CSV.
    Cv {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        model: ModelOpts,
        /// Out-of-fold `id,risk,time,event` CSV.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Cross-validate the full model and every ablation variant.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        model: ModelOpts,
    },
    /// Score a cohort with a checkpoint; writes `id,risk,time,event`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Median-split Kaplan–Meier plot with log-rank p from a risk CSV.
    PlotKm {
        #[command(flatten)]
        common: Common,
        /// `risk,time,event` CSV (extra columns are ignored).
        #[arg(long)]
        risks: Option<PathBuf>,
        /// Curve points CSV; defaults to the SVG path with a `.csv` extension.
        #[arg(long)]
        points: Option<PathBuf>,
    },
    /// Bar chart of cohort-averaged gate weights.
    PlotGates {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Per-patient decoupled feature vectors as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Analytic versus finite-difference gradients on a small model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Number of consecutive seeds starting at --seed.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

fn flags(common: &Common) -> RunConfig {
    RunConfig {
        seed: common.seed,
        out: common.out.clone(),
        ..RunConfig::default()
    }
}

fn with_inputs(mut cfg: RunConfig, inputs: &Inputs) -> RunConfig {
    cfg.cohort = inputs.cohort.clone();
    cfg.checkpoint = inputs.checkpoint.clone();
    cfg
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => settings::read_config_file(path)?,
        None => RunConfig::default(),
    };
    let merge = |flags: RunConfig| settings::overlay(&file, &flags);
    match cli.command {
        Command::Synth { common, synth, n_bins } => {
            let mut f = flags(&common);
            f.synth = synth;
            f.model.n_bins = n_bins;
            commands::synth(&merge(f))
        }
        Command::Train {
            common,
            inputs,
            model,
            history,
        } => {
            let mut f = with_inputs(flags(&common), &inputs);
            f.model = model;
            f.history = history;
            commands::train(&merge(f))
        }
        Command::Cv {
            common,
            inputs,
            model,
            predictions,
        } => {
            let mut f = with_inputs(flags(&common), &inputs);
            f.model = model;
            f.predictions = predictions;
            commands::cv(&merge(f))
        }
        Command::Ablate { common, inputs, model } => {
            let mut f = with_inputs(flags(&common), &inputs);
            f.model = model;
            commands::ablate(&merge(f))
        }
        Command::Eval { common, inputs } => commands::eval(&merge(with_inputs(flags(&common), &inputs))),
        Command::PlotKm { common, risks, points } => {
            let mut f = flags(&common);
            f.risks = risks;
            f.points = points;
            commands::plot_km(&merge(f))
        }
        Command::PlotGates { common, inputs } => commands::plot_gates(&merge(with_inputs(flags(&common), &inputs))),
        Command::ExportEmbeddings { common, inputs } => {
            commands::export_embeddings(&merge(with_inputs(flags(&common), &inputs)))
        }
        Command::Gradcheck { common, seeds } => commands::gradcheck(&merge(flags(&common)), seeds),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
