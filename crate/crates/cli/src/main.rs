//! `txkb` command-line pipeline: synth/ingest -> essences -> build-kb ->
//! rules/facts/retrieve/predict -> gen-instruct -> eval.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{CliError, ErrorKind};

const EXIT_CODES: &str = "\
Exit codes: 0 ok, 2 usage, 3 missing file, 4 schema mismatch, 5 invalid configuration, \
6 data error (leakage, empty results), 7 gateway failure, 8 other I/O.
Errors are printed to stderr as one JSON line: {\"error\":<kind>,\"exit_code\":<n>,\"message\":<text>}.
The HTTP gateway reads its API key from the environment variable named by http.api_key_env (default OPENAI_API_KEY).";

#[derive(Debug, Parser)]
#[command(name = "txkb", version, about = "Behavioral knowledge base over transaction histories", after_help = EXIT_CODES)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic histories with a planted churn rule.
    Synth(SynthArgs),
    /// Parse a raw transaction log into canonical histories.
    Ingest(IngestArgs),
    /// Compute the essence matrix as CSV.
    Essences(EssencesArgs),
    /// Fit patterns, rules and scorecards into a knowledge base.
    BuildKb(BuildKbArgs),
    /// Print rendered rules.
    Rules(RulesArgs),
    /// Instantiate per-user facts as JSON lines.
    Facts(FactsArgs),
    /// Print the prompt context for one user without calling any model.
    Retrieve(RetrieveArgs),
    /// Predict one user through a gateway.
    Predict(PredictArgs),
    /// Generate instruction-tuning triplets.
    GenInstruct(GenInstructArgs),
    /// Evaluate a strategy on the test split.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    pub users: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Planted rule, e.g. `churn:activity<=70:noise0.1`.
    #[arg(long, default_value = "churn:activity<=70:noise0.1")]
    pub plant: String,
    /// Share of labeled users held out as the test split.
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Output histories (JSON lines).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Raw transaction log (CSV or JSON lines).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Built-in adapter (rosbank, gender, datafusion) or adapter TOML file.
    #[arg(long)]
    pub adapter: Option<String>,
    /// Separate label file.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Input format: csv or jsonl (default from the file extension).
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Target name used in rule text, e.g. `churn`.
    #[arg(long)]
    pub target_name: Option<String>,
    /// Natural-language task description for the target.
    #[arg(long)]
    pub target_description: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EssencesArgs {
    #[arg(long)]
    pub histories: Option<PathBuf>,
    /// Essence catalog override (TOML).
    #[arg(long)]
    pub essences: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildKbArgs {
    #[arg(long)]
    pub histories: Option<PathBuf>,
    /// Target spec (TOML or JSON); defaults to the one recorded by synth/ingest.
    #[arg(long)]
    pub target_spec: Option<PathBuf>,
    /// Pattern selection: random, llm or without-white-box.
    #[arg(long)]
    pub selection: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub essences: Option<PathBuf>,
    /// Gateway for llm selection.
    #[arg(long)]
    pub gateway: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RulesArgs {
    #[arg(long)]
    pub kb: Option<PathBuf>,
    /// Only rules supporting this target.
    #[arg(long)]
    pub target: Option<String>,
    /// Only rules attached to this pattern id.
    #[arg(long)]
    pub pattern: Option<String>,
}

#[derive(Debug, Args)]
pub struct FactsArgs {
    #[arg(long)]
    pub kb: Option<PathBuf>,
    #[arg(long)]
    pub histories: Option<PathBuf>,
    #[arg(long)]
    pub user: Option<String>,
    /// Write to a file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub kb: Option<PathBuf>,
    #[arg(long)]
    pub histories: Option<PathBuf>,
    #[arg(long)]
    pub user: String,
    /// zs, q, fi, qfi or kb.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub target: Option<String>,
    /// Labeled examples drawn from the train split.
    #[arg(long)]
    pub shots: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub kb: Option<PathBuf>,
    #[arg(long)]
    pub histories: Option<PathBuf>,
    #[arg(long)]
    pub user: String,
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub gateway: Option<String>,
}

#[derive(Debug, Args)]
pub struct GenInstructArgs {
    #[arg(long)]
    pub kb: Option<PathBuf>,
    #[arg(long)]
    pub histories: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<String>,
    /// template or llm.
    #[arg(long, default_value = "template")]
    pub mode: String,
    #[arg(long)]
    pub gateway: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub kb: Option<PathBuf>,
    #[arg(long)]
    pub histories: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub strategy: Option<String>,
    /// 0..=16 or full.
    #[arg(long)]
    pub shots: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub gateway: Option<String>,
    /// Dataset name printed in the summary.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Write the full run report (JSON) here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::new(ErrorKind::Usage, first).line());
            return ExitCode::from(ErrorKind::Usage.code() as u8);
        }
    };
    let result = RunConfig::load(cli.config.as_deref()).and_then(|cfg| commands::run(cli.command, cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.kind.code() as u8)
        }
    }
}
