//! Command-line front end. Failures print `error[<category>]: <message>`
//! on stderr and exit with status 1 (2 for usage errors).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::train::{load_checkpoint, train_from_config};

#[derive(Debug, Parser)]
#[command(name = "depformer", version, about = "Translation with dependency-supervised attention heads")]
pub struct Cli {
    /// Run configuration (TOML)
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Model checkpoint
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long, global = true, value_name = "INT")]
    pub seed: Option<u64>,
    /// Overrides the child-head loss weight
    #[arg(long, global = true, value_name = "FLOAT")]
    pub alpha: Option<f64>,
    /// Overrides the parent-head loss weight
    #[arg(long, global = true, value_name = "FLOAT")]
    pub beta: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes metrics.jsonl and checkpoints to paths.output_dir
    Train,
    /// Translate a source file, one sentence per line
    Translate(InferenceArgs),
    /// Extract dependency trees from the parent head as CoNLL-U
    ParseAttn(InferenceArgs),
    /// Unlabeled attachment score of predicted against gold CoNLL-U
    EvalUas {
        #[arg(long)]
        predicted: PathBuf,
        #[arg(long)]
        gold: PathBuf,
    },
    /// Corpus BLEU-4 of a hypothesis file against a reference file
    EvalBleu {
        #[arg(long)]
        hypothesis: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Dump the supervised layer's attention matrices as JSON lines
    ExportAttn(InferenceArgs),
}

#[derive(Debug, clap::Args)]
pub struct InferenceArgs {
    /// Source text, one tokenized sentence per line
    #[arg(long)]
    pub input: PathBuf,
    /// Output file; stdout when omitted
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn emit(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(p) => fs::write(p, text)?,
        None => match std::io::stdout().lock().write_all(text.as_bytes()) {
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
            other => other?,
        },
    }
    Ok(())
}

fn checkpoint(cli: &Cli) -> Result<&Path> {
    cli.checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("--checkpoint is required".into()))
}

/// Executes a parsed command line.
pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train => {
            let path = cli
                .config
                .as_deref()
                .ok_or_else(|| Error::Config("--config is required for train".into()))?;
            let cfg = RunConfig::load(path)?.with_overrides(cli.seed, cli.alpha, cli.beta)?;
            let outcome = train_from_config(&cfg)?;
            let summary = serde_json::json!({
                "metrics": outcome.metrics,
                "checkpoints": outcome.checkpoints,
                "last": outcome.last,
            });
            println!("{summary}");
        }
        Command::Translate(args) | Command::ParseAttn(args) | Command::ExportAttn(args) => {
            let loaded = load_checkpoint(checkpoint(cli)?)?;
            let text = read(&args.input)?;
            let out = match &cli.command {
                Command::Translate(_) => commands::translate(&loaded, &text)?,
                Command::ParseAttn(_) => commands::parse_attn(&loaded, &text)?,
                _ => commands::export_attn(&loaded, &text)?,
            };
            emit(args.output.as_deref(), &out)?;
        }
        Command::EvalUas { predicted, gold } => {
            let report = commands::eval_uas(&read(predicted)?, &read(gold)?)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::EvalBleu { hypothesis, reference } => {
            let report = commands::eval_bleu(&read(hypothesis)?, &read(reference)?)?;
            println!("{}", serde_json::to_string(&report)?);
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and maps the outcome to an exit code.
pub fn run<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
