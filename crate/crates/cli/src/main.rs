use clap::{Parser, Subcommand, ValueEnum};
use segfuse::metrics::precision_iou_table;
use segfuse::{Error, Result};
use segfuse_cli::pipeline::{self, TrainOutcome};
use segfuse_cli::{exit_code, EvalModel, ExperimentConfig, Overrides, RunLayout, TrainStage};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser, Debug)]
#[command(
    name = "segfuse",
    version,
    about = "Synthetic fruit video segmentation: generate, train, evaluate, propagate"
)]
struct Cli {
    /// JSON experiment config; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run seed (overrides `seed`).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Run directory (overrides `output_dir`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Allow `generate` to overwrite a non-empty run directory.
    #[arg(long, global = true)]
    force: bool,
    /// Seed propagation with the ground-truth first frame.
    #[arg(long, global = true)]
    oracle_first_frame: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset and manifest.
    Generate,
    /// Train one stage and write its checkpoint and history.
    Train {
        #[arg(value_enum)]
        stage: StageArg,
    },
    /// Score models on the test split and write reports.
    Evaluate {
        /// Comma-separated subset of segnet, unsupervised, weighted_mean, fusion.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        models: Option<Vec<String>>,
    },
    /// Propagate a first-frame mask through a clip directory into --out.
    Propagate {
        /// Tracker checkpoint; defaults to the run's cycle checkpoint.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Directory of frame_%05d.png files.
        #[arg(long, value_name = "DIR")]
        clip: PathBuf,
        /// Binary PNG mask of frame 0.
        #[arg(long, value_name = "PATH")]
        first_mask: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum StageArg {
    Seg,
    Cycle,
    Fusion,
}

impl From<StageArg> for TrainStage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Seg => TrainStage::Seg,
            StageArg::Cycle => TrainStage::Cycle,
            StageArg::Fusion => TrainStage::Fusion,
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let base = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    base.resolve(&Overrides {
        seed: cli.seed,
        output_dir: cli.out.clone(),
        force: cli.force,
        oracle_first_frame: cli.oracle_first_frame,
    })
}

fn parse_models(names: Option<&[String]>) -> Result<Vec<EvalModel>> {
    match names {
        None => Ok(EvalModel::ALL.to_vec()),
        Some(names) => {
            let models = names
                .iter()
                .map(|n| n.trim())
                .filter(|n| !n.is_empty())
                .map(str::parse)
                .collect::<Result<Vec<EvalModel>>>()?;
            if models.is_empty() {
                return Err(Error::Config(
                    "--models selects no models; evaluating zero models is not allowed".into(),
                ));
            }
            Ok(models)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let started = Instant::now();
    match &cli.command {
        Command::Generate => {
            let manifest = pipeline::generate(&cfg)?;
            for split in &manifest.splits {
                let frames: usize = split.clips.iter().map(|c| c.frames).sum();
                println!(
                    "{:<11} {:>4} clips {:>6} frames",
                    split.name.as_str(),
                    split.clips.len(),
                    frames
                );
            }
            println!(
                "dataset written to {}",
                RunLayout::new(&cfg.output_dir).data().display()
            );
        }
        Command::Train { stage } => {
            let stage = TrainStage::from(*stage);
            match pipeline::train(&cfg, stage)? {
                TrainOutcome::Seg(h) => {
                    if let Some(best) = h.best_epoch.and_then(|b| h.epochs.get(b - 1)) {
                        println!(
                            "segnet: {} epochs, best val IoU {:.4} at epoch {}",
                            h.epochs.len(),
                            best.val_iou,
                            best.epoch
                        );
                    }
                }
                TrainOutcome::Cycle(h) => {
                    let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"));
                    println!(
                        "cycle: {} steps, smoothed loss {} -> {}",
                        h.loss.len(),
                        fmt(h.initial_smoothed()),
                        fmt(h.final_smoothed())
                    );
                }
                TrainOutcome::Fusion(h) => {
                    if let (Some(first), Some(last)) = (h.epochs.first(), h.epochs.last()) {
                        println!(
                            "fusion: {} epochs, loss {:.4} -> {:.4}",
                            h.epochs.len(),
                            first.loss,
                            last.loss
                        );
                    }
                }
            }
            println!(
                "checkpoint written to {}",
                RunLayout::new(&cfg.output_dir).checkpoint(stage).display()
            );
        }
        Command::Evaluate { models } => {
            let models = parse_models(models.as_deref())?;
            let evaluation = pipeline::evaluate(&cfg, &models)?;
            print!("{}", precision_iou_table(&evaluation.reports));
            println!(
                "reports written to {}",
                RunLayout::new(&cfg.output_dir).reports().display()
            );
        }
        Command::Propagate {
            checkpoint,
            clip,
            first_mask,
        } => {
            let checkpoint = checkpoint
                .clone()
                .unwrap_or_else(|| RunLayout::new(&cfg.output_dir).checkpoint(TrainStage::Cycle));
            let n = pipeline::propagate(&checkpoint, clip, first_mask, &cfg.output_dir)?;
            println!("{n} frames written to {}", cfg.output_dir.display());
        }
    }
    eprintln!("done in {:.1} s", started.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("segfuse: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
