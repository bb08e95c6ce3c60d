//! Command-line entry point.
//!
//! Every command works inside one run directory. Failures print
//! `error[<category>]: <message>` on stderr and exit with the category's
//! code.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ctxasr::contextforge::{ContextBundle, HttpClient, LlmClient};
use ctxasr::corpus::read_features;
use ctxasr::pipeline::{ContextMode, Run, RunConfig, Status};
use ctxasr::trainer::Stage;
use ctxasr::{Error, Result};

#[derive(Parser)]
#[command(name = "ctxasr", version, about = "Contextual speech recognition on a desk-scale model")]
struct Cli {
    /// Run configuration (TOML). Without it an existing run directory is
    /// reopened from its own snapshot, or the defaults are used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; overrides `output_dir` from the configuration.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Redo work whose outputs already exist and accept a changed
    /// configuration.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train and test manifests.
    PrepareData,
    /// Pretrain the encoder inside an attention encoder-decoder and export it.
    TrainAed,
    /// Build the recognizer on the exported encoder and pretrain its decoder.
    PretrainDecoder,
    /// Supervised fine-tuning, stage 1 (adapter) or 2 (adapter, encoder, LoRA).
    TrainSft {
        #[arg(long)]
        stage: Stage,
    },
    /// Attach hotwords and summaries to both splits.
    ForgeContext {
        /// Query the configured LLM endpoint instead of the offline extractor.
        #[arg(long)]
        online: bool,
    },
    /// Contextual fine-tuning on forged and plain data.
    TrainContext,
    /// Transcribe one utterance.
    Transcribe {
        /// Feature file written by `prepare-data`.
        #[arg(long, conflicts_with = "utterance")]
        features: Option<PathBuf>,
        /// Test utterance id.
        #[arg(long)]
        utterance: Option<String>,
        /// Comma-separated hotwords.
        #[arg(long, value_delimiter = ',')]
        hotwords: Vec<String>,
        #[arg(long)]
        summary: Option<String>,
        /// Model to use; defaults to the most trained one.
        #[arg(long)]
        stage: Option<Stage>,
    },
    /// Score the test split.
    Evaluate {
        #[arg(long, default_value = "both")]
        context: ContextMode,
        #[arg(long)]
        stage: Option<Stage>,
    },
    /// Every step from data preparation to evaluation.
    RunAll {
        #[arg(long)]
        online: bool,
    },
}

fn open(cli: &Cli) -> Result<Run> {
    match &cli.config {
        Some(path) => {
            let cfg = RunConfig::load(path)?;
            let dir = cli.run_dir.clone().unwrap_or_else(|| cfg.output_dir.clone());
            Run::open(&dir, RunConfig { output_dir: dir.clone(), ..cfg }, cli.force)
        }
        None => {
            let dir = cli
                .run_dir
                .clone()
                .unwrap_or_else(|| RunConfig::default().output_dir);
            if dir.join("config.toml").exists() {
                Run::resume(&dir, cli.force)
            } else {
                Run::open(
                    &dir,
                    RunConfig {
                        output_dir: dir.clone(),
                        ..RunConfig::default()
                    },
                    cli.force,
                )
            }
        }
    }
}

fn client(run: &Run, online: bool) -> Result<Option<Box<dyn LlmClient>>> {
    if !online {
        return Ok(None);
    }
    match HttpClient::from_config(&run.config().client) {
        Some(c) => Ok(Some(Box::new(c))),
        None => Err(Error::Config("--online needs client.endpoint in the configuration".into())),
    }
}

fn report(name: &str, s: Status) {
    match s {
        Status::Done => println!("{name}: done"),
        Status::Skipped => println!("{name}: already complete (use --force to redo)"),
    }
}

fn run(cli: Cli) -> Result<()> {
    let run = open(&cli)?;
    match cli.command {
        Command::PrepareData => report("prepare-data", run.prepare_data()?),
        Command::TrainAed => report("train-aed", run.train_aed()?),
        Command::PretrainDecoder => report("pretrain-decoder", run.pretrain_decoder()?),
        Command::TrainSft { stage } => report(stage.command(), run.train_sft(stage)?),
        Command::ForgeContext { online } => {
            let c = client(&run, online)?;
            report("forge-context", run.forge_context(c.as_deref())?)
        }
        Command::TrainContext => report("train-context", run.train_context()?),
        Command::Transcribe {
            features,
            utterance,
            hotwords,
            summary,
            stage,
        } => {
            let (feats, stored) = match (features, utterance) {
                (Some(p), _) => (read_features(&p)?, None),
                (None, Some(id)) => {
                    let set = run.eval_set()?;
                    let u = set
                        .get(&id)
                        .ok_or_else(|| Error::InvalidInput(format!("no test utterance `{id}`")))?;
                    (u.features.clone(), u.context.clone())
                }
                (None, None) => return Err(Error::InvalidInput("pass --features or --utterance".into())),
            };
            let bundle = if hotwords.is_empty() && summary.is_none() {
                stored
            } else {
                Some(ContextBundle::new(&hotwords, summary.as_deref()))
            };
            let (t, flags) = run.transcribe(&feats, bundle.as_ref(), stage)?;
            println!("{}", t.text);
            let names: Vec<String> = flags.iter().map(|f| format!("{f:?}").to_lowercase()).collect();
            println!("termination: {:?}", t.termination);
            println!("flags: {}", if names.is_empty() { "none".into() } else { names.join(",") });
        }
        Command::Evaluate { context, stage } => print!("{}", run.evaluate(context, stage)?.to_table()),
        Command::RunAll { online } => {
            let c = client(&run, online)?;
            print!("{}", run.run_all(c.as_deref())?.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
