//! `sgcap`: end-to-end pipeline driver.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 configuration error.

mod config;
mod manifest;
mod stages;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::PipelineConfig;
use sgcap_core::error::{Error, Result};

#[derive(Parser)]
#[command(
    name = "sgcap",
    version,
    about = "Self-guiding multimodal LSTM captioning pipeline"
)]
struct Cli {
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override any configuration key, e.g. --set learning_rate=1e-3.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Scrub and validate the raw caption corpus.
    Ingest,
    /// Partition the cleaned corpus into short and long descriptions.
    Split,
    /// Build the vocabulary from the cleaned corpus.
    Vocab,
    /// Train the base model on the short-description half.
    TrainMlstm,
    /// Extract and cache guiding textual features for the long half.
    Gtf,
    /// Train the guided model on the long-description half.
    TrainSglstm,
    /// Decode captions for one image feature file.
    Caption {
        /// Image feature file to caption.
        #[arg(long)]
        feature: PathBuf,
        /// Checkpoint to decode with (defaults to the guided model).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Image id, used to look up the cached guiding feature.
        #[arg(long)]
        id: Option<String>,
    },
    /// Score the guided model on the long-description test captions.
    Evaluate,
    /// Convert plain-text vectors into binary feature files.
    FeaturePack {
        /// Directory of .txt files with whitespace-separated floats.
        #[arg(long)]
        input_dir: PathBuf,
    },
}

fn build_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    for pair in &cli.overrides {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set expects KEY=VALUE, got '{pair}'"))
        })?;
        config.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(cli: &Cli) -> Result<()> {
    let config = build_config(cli)?;
    match &cli.command {
        Cmd::Ingest => stages::cmd_ingest(&config),
        Cmd::Split => stages::cmd_split(&config),
        Cmd::Vocab => stages::cmd_vocab(&config),
        Cmd::TrainMlstm => stages::cmd_train_mlstm(&config),
        Cmd::Gtf => stages::cmd_gtf(&config),
        Cmd::TrainSglstm => stages::cmd_train_sglstm(&config),
        Cmd::Caption { feature, model, id } => stages::cmd_caption(
            &config,
            &stages::CaptionArgs {
                model: model.clone(),
                feature: feature.clone(),
                image_id: id.clone(),
            },
        ),
        Cmd::Evaluate => stages::cmd_evaluate(&config),
        Cmd::FeaturePack { input_dir } => stages::cmd_feature_pack(
            &config,
            &stages::FeaturePackArgs {
                input_dir: input_dir.clone(),
            },
        ),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
