//! Library side of the `hyperpeft` command: config loading, the subcommands,
//! and run manifests.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

pub use commands::Outcome;
pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "hyperpeft", version, about = "Train hypermodels that generate PEFT parameters, and evaluate them")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct RunArgs {
    /// JSON run config (or a manifest from an earlier run).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Field overrides such as --train.steps=500.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--SECTION.FIELD=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the default config as JSON.
    DefaultConfig,
    /// Write the synthetic task suite and corpus.
    SynthData(RunArgs),
    /// Continuation-train the downstream model on the corpus.
    LmAdapt(RunArgs),
    /// Hyperpretrain the hypermodel on corpus windows.
    Hyperpretrain(RunArgs),
    /// Multi-task training on the held-in tasks in train.mode.
    Mtf(RunArgs),
    /// Fine-tune fresh PEFT parameters per held-out task.
    PeftFinetune(RunArgs),
    /// Evaluate an adapter source on a task split.
    Eval(RunArgs),
    /// Generate one adapter file from few-shot examples.
    GenAdapter(RunArgs),
    /// Finite-difference check of the hypermodel gradients.
    Gradcheck(RunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::DefaultConfig => "default-config",
            Command::SynthData(_) => "synth-data",
            Command::LmAdapt(_) => "lm-adapt",
            Command::Hyperpretrain(_) => "hyperpretrain",
            Command::Mtf(_) => "mtf",
            Command::PeftFinetune(_) => "peft-finetune",
            Command::Eval(_) => "eval",
            Command::GenAdapter(_) => "gen-adapter",
            Command::Gradcheck(_) => "gradcheck",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] hyperpeft::Error),
    #[error("{0}")]
    Check(String),
}

impl CliError {
    /// 2 for config errors, 3 for a non-finite loss, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(hyperpeft::Error::Config { .. }) => 2,
            CliError::Core(hyperpeft::Error::NonFiniteLoss { .. }) => 3,
            _ => 1,
        }
    }
}

/// Result of a finished command: the manifest written next to its artifacts.
#[derive(Debug, Clone)]
pub struct Run {
    pub manifest_path: PathBuf,
    pub manifest: Value,
    pub outcome: Outcome,
}

/// Runs a parsed command. Every run writes `{out_dir}/{command}_manifest.json`
/// holding the resolved config, seeds, versions and artifacts.
pub fn execute(command: &Command) -> Result<Option<Run>, CliError> {
    let args = match command {
        Command::DefaultConfig => {
            println!("{}", serde_json::to_string_pretty(&RunConfig::default()).map_err(hyperpeft::Error::from)?);
            return Ok(None);
        }
        Command::SynthData(a)
        | Command::LmAdapt(a)
        | Command::Hyperpretrain(a)
        | Command::Mtf(a)
        | Command::PeftFinetune(a)
        | Command::Eval(a)
        | Command::GenAdapter(a)
        | Command::Gradcheck(a) => a,
    };
    let cfg = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    std::fs::create_dir_all(&cfg.io.out_dir).map_err(hyperpeft::Error::from)?;
    log::info!("{} -> {}", command.name(), cfg.io.out_dir.display());
    let outcome = match command {
        Command::SynthData(_) => commands::cmd_synth_data(&cfg),
        Command::LmAdapt(_) => commands::cmd_lm_adapt(&cfg),
        Command::Hyperpretrain(_) => commands::cmd_hyperpretrain(&cfg),
        Command::Mtf(_) => commands::cmd_mtf(&cfg),
        Command::PeftFinetune(_) => commands::cmd_peft_finetune(&cfg),
        Command::Eval(_) => commands::cmd_eval(&cfg),
        Command::GenAdapter(_) => commands::cmd_gen_adapter(&cfg),
        Command::Gradcheck(_) => commands::cmd_gradcheck(&cfg),
        Command::DefaultConfig => unreachable!(),
    }?;
    let manifest = json!({
        "command": command.name(),
        "config": cfg,
        "seeds": {
            "train": cfg.train.seed,
            "corpus": cfg.data.corpus_seed,
            "synth": cfg.data.synth_seed,
            "eval": cfg.eval.seeds,
            "finetune": cfg.finetune.protocol.seeds,
            "gradcheck": cfg.gradcheck.seed,
        },
        "versions": commands::versions(),
        "artifacts": outcome.artifacts,
        "summary": outcome.summary,
    });
    let manifest_path = cfg.io.out_dir.join(format!("{}_manifest.json", command.name()));
    let text = serde_json::to_string_pretty(&manifest).map_err(hyperpeft::Error::from)?;
    std::fs::write(&manifest_path, text).map_err(hyperpeft::Error::from)?;
    if outcome.summary.get("passed") == Some(&Value::Bool(false)) {
        return Err(CliError::Check(format!("{} failed: {}", command.name(), outcome.summary)));
    }
    Ok(Some(Run {
        manifest_path,
        manifest,
        outcome,
    }))
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<Option<Run>, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| {
        CliError::Core(hyperpeft::Error::Config {
            path: "args".into(),
            msg: e.to_string(),
        })
    })?;
    execute(&cli.command)
}
