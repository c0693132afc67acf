use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use factorcodec::checkpoint::load_codec;
use factorcodec::config::RunConfig;
use factorcodec::data::DatasetManifest;
use factorcodec::model::Codec;
use factorcodec::ops::{self, ConvertSpeaker};
use factorcodec::train::run_training;

#[derive(Parser)]
#[command(name = "factorcodec", version, about = "Low-rate speech codec with separate speaker, content and prosody tokens")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a flat key = value config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value`, applied over the config file.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Encode a WAV file into a .frc stream.
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a .frc stream to WAV.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Voice the source utterance with the target's speaker.
    Convert {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use the target's quantized speaker indices (quantized-speaker models).
        #[arg(long)]
        target_indices: bool,
    },
    /// Print the header and rates of a .frc stream.
    Inspect {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Write per-utterance speaker, content and prosody embeddings as CSV.
    ExportEmbeddings {
        #[arg(long)]
        model: PathBuf,
        /// Manifest JSON or a directory of WAV files.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

fn model(path: &Path) -> Result<Codec> {
    require(path, "model")?;
    load_codec(path).with_context(|| format!("loading model {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, overrides } => {
            let run = RunConfig::resolve(config.as_deref(), &overrides)?;
            let cfg = run.train_config()?;
            let data = run.data.as_deref().context("no training data set (data = <dir or manifest>)")?;
            let manifest = DatasetManifest::open(data, cfg.segment_seconds)?;
            if let Some(r) = &run.resume {
                require(r, "checkpoint")?;
            }
            let last = run_training(cfg, &manifest, &run.out_dir, run.resume.as_deref())?;
            println!("{}", last.display());
        }
        Command::Encode { model: m, input, out } => {
            require(&input, "input")?;
            let codec = model(&m)?;
            let report = ops::encode_file(&codec, &input, &out)?;
            println!("{report}");
        }
        Command::Decode { model: m, input, out } => {
            require(&input, "stream")?;
            let codec = model(&m)?;
            let audio = ops::decode_file(&codec, &input, &out)?;
            println!("{} samples at {} Hz", audio.len(), audio.sample_rate);
        }
        Command::Convert { model: m, src, tgt, out, target_indices } => {
            require(&src, "source")?;
            require(&tgt, "target")?;
            let codec = model(&m)?;
            let mode = if target_indices { ConvertSpeaker::TargetIndices } else { ConvertSpeaker::Continuous };
            let ts = ops::convert_files(&codec, &src, &tgt, &out, mode)?;
            println!("{} content tokens, {} prosody tokens", ts.content_tokens.len(), ts.prosody_tokens.len());
        }
        Command::Inspect { input } => {
            require(&input, "stream")?;
            println!("{}", ops::inspect_file(&input)?);
        }
        Command::ExportEmbeddings { model: m, manifest, out } => {
            if !manifest.exists() {
                bail!("manifest {} does not exist", manifest.display());
            }
            let codec = model(&m)?;
            let manifest = DatasetManifest::open(&manifest, 0.0)?;
            let n = ops::export_embeddings(&codec, &manifest, &out)?;
            println!("{n} rows");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
