use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use egovos::config::RunConfig;
use egovos::pipeline;

/// Video object segmentation with RGB and depth feature fusion.
///
/// Settings come from built-in defaults, then the `--config` file, then
/// command-line flags (later wins).
#[derive(Parser, Debug)]
#[command(name = "egovos", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for initialization, sampling and synthesis order.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Enable test-time augmentation with these scales, e.g. `1.2,1.3,1.4`.
    #[arg(long, global = true, value_delimiter = ',')]
    scales: Option<Vec<f64>>,
    /// Enable test-time augmentation with horizontal flips.
    #[arg(long, global = true)]
    flip: bool,
    /// Disable the depth stream and fusion.
    #[arg(long, global = true)]
    no_fusion: bool,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic train and eval datasets.
    Synth,
    /// Train a model and write a checkpoint plus loss curves.
    Train,
    /// Segment a dataset and write one palette mask per frame.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `dataset.json`, a directory holding one, or a sequence manifest.
        #[arg(long)]
        data: PathBuf,
    },
    /// Score predicted masks against ground truth.
    Eval {
        /// The `masks/` directory written by `infer`.
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train with and without fusion and evaluate with and without TTA.
    Ablate,
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::read(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(scales) = &common.scales {
        cfg.tta.scales = scales.clone();
        cfg.tta.enabled = true;
    }
    if common.flip {
        cfg.tta.flip = true;
        cfg.tta.enabled = true;
    }
    if common.no_fusion {
        cfg.model.fusion.enabled = false;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg.resolve()?)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = resolve(&cli.common)?;
    let mut log = |msg: &str| eprintln!("{msg}");
    match cli.command {
        Command::Synth => {
            let out = pipeline::cmd_synth(&cfg)?;
            println!("train: {}", out.train.display());
            println!("eval: {}", out.eval.display());
        }
        Command::Train => {
            let ckpt = pipeline::cmd_train(&cfg, &mut log)?;
            println!("checkpoint: {}", ckpt.display());
        }
        Command::Infer { checkpoint, data } => {
            let masks = pipeline::cmd_infer(&cfg, &checkpoint, &data, &mut log)?;
            println!("masks: {}", masks.display());
        }
        Command::Eval { predictions, data } => {
            let report = pipeline::cmd_eval(&cfg, &predictions, &data)?;
            print!("{}", report.table());
        }
        Command::Ablate => {
            let rows = pipeline::cmd_ablate(&cfg, &mut log)?;
            print!("{}", pipeline::ablation_table(&rows));
        }
    }
    Ok(())
}
