//! Command-line driver for the segmentation pipeline: synthetic data,
//! ingestion, fold splitting, training, inference, ensembling, evaluation,
//! attribution, and overlay rendering. Every run echoes its resolved
//! configuration and appends input/output checksums to `runs.jsonl` under
//! the output directory.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use manifest::{sha256_hex, DirLock, RunRecord};

#[derive(Parser)]
#[command(name = "xseg3d", version, about = "Explainable 3D segmentation engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file (defaults are built in).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config entry: section.key=value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Override the global seed (also via XSEG3D_SEED).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts and the run log.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic slice-stack dataset with RLE manifest.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Assemble, crop, and normalize slice stacks into volume caches.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Dataset directory holding images/ and manifest.csv.
        #[arg(long)]
        data: PathBuf,
    },
    /// Assign cases to stratified group folds.
    Split {
        #[command(flatten)]
        common: Common,
        /// Directory of .xvol volume caches.
        #[arg(long)]
        data: PathBuf,
        /// Number of folds.
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Train one fold from scratch (run 1 of the schedule).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Fold assignment CSV from `split`.
        #[arg(long)]
        folds: PathBuf,
        #[arg(long)]
        fold: usize,
    },
    /// Fine-tune a checkpoint with the shorter second schedule.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        folds: PathBuf,
        #[arg(long)]
        fold: usize,
    },
    /// Sliding-window inference with a single checkpoint.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        case: Option<String>,
        #[arg(long)]
        day: Option<u32>,
    },
    /// Average fold checkpoints and threshold into masks.
    Ensemble {
        #[command(flatten)]
        common: Common,
        /// Fold checkpoints (repeat the flag or pass several paths).
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        case: Option<String>,
        #[arg(long)]
        day: Option<u32>,
    },
    /// Exact metrics for predicted masks against cached ground truth.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory of .xmask predictions.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of ground-truth .xvol volumes.
        #[arg(long)]
        data: PathBuf,
    },
    /// Attribution maps for one scan.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        case: String,
        #[arg(long)]
        day: u32,
        /// gradcam | guided_backprop | guided_gradcam | deeplift.
        #[arg(long)]
        method: Option<String>,
        /// Class name or index (large_bowel, small_bowel, stomach).
        #[arg(long)]
        class: Option<String>,
        /// Recorded activation to target for the CAM variants.
        #[arg(long)]
        layer: Option<String>,
        /// Also verify pre-rectification map additivity over a split of M.
        #[arg(long)]
        probe_additivity: bool,
    },
    /// Render an attribution overlay slice as PNG.
    Render {
        #[command(flatten)]
        common: Common,
        /// Attribution container from `explain`.
        #[arg(long)]
        map: PathBuf,
        /// Directory of .xvol volumes for the anatomy layer.
        #[arg(long)]
        data: PathBuf,
        /// Slice axis: 0=depth, 1=height, 2=width.
        #[arg(long, default_value_t = 0)]
        axis: usize,
        /// Slice index (defaults to the middle slice).
        #[arg(long)]
        index: Option<usize>,
        /// Append a side-by-side ground-truth panel.
        #[arg(long)]
        truth: bool,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth { common }
            | Command::Ingest { common, .. }
            | Command::Split { common, .. }
            | Command::Train { common, .. }
            | Command::Finetune { common, .. }
            | Command::Predict { common, .. }
            | Command::Ensemble { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Explain { common, .. }
            | Command::Render { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Ingest { .. } => "ingest",
            Command::Split { .. } => "split",
            Command::Train { .. } => "train",
            Command::Finetune { .. } => "finetune",
            Command::Predict { .. } => "predict",
            Command::Ensemble { .. } => "ensemble",
            Command::Evaluate { .. } => "evaluate",
            Command::Explain { .. } => "explain",
            Command::Render { .. } => "render",
        }
    }

    fn inputs(&self) -> Vec<PathBuf> {
        match self {
            Command::Synth { .. } => vec![],
            Command::Ingest { data, .. } => vec![data.clone()],
            Command::Split { data, .. } => vec![data.clone()],
            Command::Train { data, folds, .. } => vec![data.clone(), folds.clone()],
            Command::Finetune {
                checkpoint,
                data,
                folds,
                ..
            } => vec![checkpoint.clone(), data.clone(), folds.clone()],
            Command::Predict {
                checkpoint, data, ..
            } => vec![checkpoint.clone(), data.clone()],
            Command::Ensemble {
                checkpoints, data, ..
            } => {
                let mut v = checkpoints.clone();
                v.push(data.clone());
                v
            }
            Command::Evaluate { pred, data, .. } => vec![pred.clone(), data.clone()],
            Command::Explain {
                checkpoint, data, ..
            } => vec![checkpoint.clone(), data.clone()],
            Command::Render { map, data, .. } => vec![map.clone(), data.clone()],
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let common = cli.command.common();
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.apply_overrides(&common.sets)?;
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
    }
    let out_dir = common.out.clone();
    let _lock = DirLock::acquire(&out_dir)?;
    let echoed = cfg.echo_to(&out_dir)?;
    let config_sha = sha256_hex(&std::fs::read(&echoed)?);

    let outputs = match &cli.command {
        Command::Synth { .. } => commands::synth(&cfg, &out_dir)?,
        Command::Ingest { data, .. } => commands::ingest(&cfg, data, &out_dir)?,
        Command::Split { data, k, .. } => commands::split(&cfg, data, *k, &out_dir)?,
        Command::Train { data, folds, fold, .. } => {
            commands::train(&cfg, data, folds, *fold, &out_dir)?
        }
        Command::Finetune {
            checkpoint,
            data,
            folds,
            fold,
            ..
        } => commands::finetune_cmd(&cfg, checkpoint, data, folds, *fold, &out_dir)?,
        Command::Predict {
            checkpoint,
            data,
            case,
            day,
            ..
        } => commands::predict(&cfg, checkpoint, data, case.as_deref(), *day, &out_dir)?,
        Command::Ensemble {
            checkpoints,
            data,
            case,
            day,
            ..
        } => commands::ensemble(&cfg, checkpoints, data, case.as_deref(), *day, &out_dir)?,
        Command::Evaluate { pred, data, .. } => commands::evaluate(pred, data, &out_dir)?,
        Command::Explain {
            checkpoint,
            data,
            case,
            day,
            method,
            class,
            layer,
            probe_additivity,
            ..
        } => commands::explain(
            &cfg,
            checkpoint,
            data,
            case,
            *day,
            method.as_deref(),
            class.as_deref(),
            layer.as_deref(),
            *probe_additivity,
            &out_dir,
        )?,
        Command::Render {
            map,
            data,
            axis,
            index,
            truth,
            ..
        } => commands::render(map, data, *axis, *index, *truth, &out_dir)?,
    };

    RunRecord {
        subcommand: cli.command.name().to_string(),
        inputs: cli.command.inputs(),
        config_sha256: config_sha,
        seed: cfg.run.seed,
        outputs,
    }
    .append_to(&out_dir)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
