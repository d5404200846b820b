use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dlsa::classifier::ResidualKind;
use dlsa::{DlsaError, Result};
use dlsa_cli::commands::{probe_csv, train_summary};
use dlsa_cli::{cmd_eval, cmd_gen, cmd_probe, cmd_train, exit_code, init_threads, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "dlsa", version, about = "Flow-filter cascades for long-tailed classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test pair.
    Gen(Common),
    /// Fit a cascade on the training file.
    Train(Common),
    /// Evaluate a model and write the report, confusion and routing tables.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model file; defaults to `<out>/model.dlsa`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Dataset to evaluate; defaults to the configured test file.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Oracle head/tail separation probe.
    Probe {
        #[command(flatten)]
        common: Common,
        /// Comma-separated probabilities, e.g. `0.5,0.7,0.9,1`.
        #[arg(long, value_delimiter = ',')]
        p: Option<Vec<f64>>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long = "filter-frac")]
    filter_frac: Option<f64>,
    /// Residual classifier: linear, balsoftmax or cosine.
    #[arg(long)]
    classifier: Option<ResidualKind>,
    /// Drop the balancedness term.
    #[arg(long = "no-bal")]
    no_bal: bool,
    /// Drop the purity term.
    #[arg(long = "no-pure")]
    no_pure: bool,
    /// Unweighted likelihood (class-weight exponent 0).
    #[arg(long = "no-mle-weight")]
    no_mle_weight: bool,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply(&Overrides {
            seed: self.seed,
            out: self.out.clone(),
            stages: self.stages,
            clusters: self.clusters,
            filter_frac: self.filter_frac,
            classifier: self.classifier,
            no_bal: self.no_bal,
            no_pure: self.no_pure,
            no_mle_weight: self.no_mle_weight,
        })?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<String> {
    init_threads()?;
    match cli.command {
        Command::Gen(c) => cmd_gen(&c.resolve()?),
        Command::Train(c) => cmd_train(&c.resolve()?).map(|fit| train_summary(&fit)),
        Command::Eval { common, model, data } => {
            let report = cmd_eval(&common.resolve()?, model, data)?;
            Ok(serde_json::to_string_pretty(&report).map_err(DlsaError::from)? + "\n")
        }
        Command::Probe { common, p } => {
            let mut cfg = common.resolve()?;
            if let Some(p) = p {
                cfg.probe.p = p;
            }
            cmd_probe(&cfg).map(|rows| probe_csv(&rows))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
