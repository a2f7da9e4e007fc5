use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod config;

use config::{PolicyStage, RunConfig, SplitName};
use regimelab::igtools::IgTask;
use regimelab::ErrorKind;

#[derive(Debug, Parser)]
#[command(name = "regimelab", version, about = "Simulate regime-switching markets, train aligned policies and replay adaptive deployment")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    Sft,
    Rm,
    Rlmf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate prices and indicators.
    Simulate,
    /// Build examples, splits and preference pairs from a simulation.
    BuildDataset,
    /// Run one training stage.
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
    },
    /// Replay a split through the adaptive and frozen arms.
    Deploy,
    /// Score a policy checkpoint on a split.
    Eval {
        #[arg(long, value_enum)]
        split: Option<SplitName>,
        #[arg(long, value_enum)]
        checkpoint: Option<PolicyStage>,
    },
    /// Cluster embeddings and report information gain or variance reduction.
    Ig {
        /// Embedding files, replacing the configured list.
        #[arg(long)]
        input: Vec<PathBuf>,
        #[arg(long, value_enum)]
        task: Vec<Task>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Task {
    Movement,
    Categorical,
}

impl From<Task> for IgTask {
    fn from(t: Task) -> Self {
        match t {
            Task::Movement => IgTask::Movement,
            Task::Categorical => IgTask::Categorical,
        }
    }
}

/// An error with the exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: String) -> Self {
        Self { code: 2, message }
    }

    pub fn data(message: String) -> Self {
        Self { code: 3, message }
    }
}

impl From<regimelab::Error> for Failure {
    fn from(e: regimelab::Error) -> Self {
        let code = match e.kind() {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numerical => 4,
        };
        Self { code, message: e.to_string() }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    if let Command::Ig { input, task } = &cli.command {
        if !input.is_empty() {
            cfg.ig.inputs = input.clone();
        }
        if !task.is_empty() {
            cfg.ig.tasks = task.iter().map(|&t| t.into()).collect();
        }
    }
    if let Command::Eval { split, checkpoint } = &cli.command {
        if let Some(s) = split {
            cfg.eval.split = *s;
        }
        if let Some(c) = checkpoint {
            cfg.eval.checkpoint = *c;
        }
    }
    cfg.validate()?;
    match cli.command {
        Command::Simulate => commands::simulate(&cfg),
        Command::BuildDataset => commands::build_dataset(&cfg),
        Command::Train { stage: Stage::Sft } => commands::train_sft(&cfg),
        Command::Train { stage: Stage::Rm } => commands::train_rm(&cfg),
        Command::Train { stage: Stage::Rlmf } => commands::train_rlmf(&cfg),
        Command::Deploy => commands::deploy(&cfg),
        Command::Eval { .. } => commands::eval(&cfg),
        Command::Ig { .. } => commands::ig(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
