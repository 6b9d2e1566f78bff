//! `lameness` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lameness_core::evaluation::{render_report, InputType};
use lameness_core::pipeline::{self, PipelineConfig};
use lameness_core::{Error, Result};

#[derive(Parser)]
#[command(name = "lameness", version, about = "Cow lameness detection pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Pipeline config file (TOML).
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Args)]
struct InputArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Input types to process; defaults to the configured grid.
    #[arg(long = "input", value_enum)]
    inputs: Vec<InputArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum InputArg {
    Rgb,
    Depth,
    Mask,
    SegmOverDepth,
}

impl From<InputArg> for InputType {
    fn from(a: InputArg) -> Self {
        match a {
            InputArg::Rgb => InputType::Rgb,
            InputArg::Depth => InputType::Depth,
            InputArg::Mask => InputType::Mask,
            InputArg::SegmOverDepth => InputType::SegmOverDepth,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a default config file.
    InitConfig {
        path: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Generate the synthetic corpus and manifest.
    Synth(ConfigArg),
    /// Hue-encode raw depth fragments.
    EncodeDepth(ConfigArg),
    /// Write cow-disjoint train/validation manifests.
    Split(ConfigArg),
    /// Train a segmenter per view.
    TrainSeg(ConfigArg),
    /// Predict masks and build Mask / SegmOverDepth inputs.
    Masks(ConfigArg),
    /// Extract two-pathway features.
    Features(InputArgs),
    /// Train the lameness classifier.
    TrainCls(InputArgs),
    /// Evaluate every grid cell on the validation split.
    Evaluate(ConfigArg),
    /// Run every stage in order.
    All(ConfigArg),
}

fn load(arg: &ConfigArg) -> Result<PipelineConfig> {
    PipelineConfig::load(&arg.config)
}

fn selected_inputs(args: &InputArgs, config: &PipelineConfig) -> Vec<InputType> {
    if args.inputs.is_empty() {
        config.grid.inputs.clone()
    } else {
        args.inputs.iter().map(|&a| a.into()).collect()
    }
}

fn init_config(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::InvalidArgument(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    std::fs::write(path, PipelineConfig::default().to_toml()).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitConfig { path, force } => {
            init_config(&path, force)?;
            println!("wrote {}", path.display());
        }
        Command::Synth(c) => {
            let records = pipeline::cmd_synth(&load(&c)?)?;
            println!("synth: {} manifest records", records.len());
        }
        Command::EncodeDepth(c) => {
            let n = pipeline::cmd_encode_depth(&load(&c)?)?;
            println!("encode-depth: {n} clips");
        }
        Command::Split(c) => {
            let split = pipeline::cmd_split(&load(&c)?)?;
            println!(
                "split: {} train / {} validation records, validation cows {}",
                split.train.len(),
                split.validation.len(),
                split.validation_cows.join(" ")
            );
        }
        Command::TrainSeg(c) => {
            for (view, t) in pipeline::cmd_train_seg(&load(&c)?)? {
                println!(
                    "train-seg {view}: best val IoU {:.4} at epoch {}",
                    t.best_val_iou, t.best_epoch
                );
            }
        }
        Command::Masks(c) => {
            let n = pipeline::cmd_masks(&load(&c)?)?;
            println!("masks: {n} fragments");
        }
        Command::Features(a) => {
            let config = load(&a.config)?;
            let n = pipeline::cmd_features(&config, &selected_inputs(&a, &config))?;
            println!("features: {n} vectors");
        }
        Command::TrainCls(a) => {
            let config = load(&a.config)?;
            for (view, input, t) in pipeline::cmd_train_cls(&config, &selected_inputs(&a, &config))? {
                println!(
                    "train-cls {view}/{input}: best val accuracy {:.4} at epoch {}",
                    t.best_val_accuracy, t.best_epoch
                );
            }
        }
        Command::Evaluate(c) => print!("{}", render_report(&pipeline::cmd_evaluate(&load(&c)?)?)),
        Command::All(c) => print!("{}", render_report(&pipeline::run_all(&load(&c)?)?)),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::FAILURE
        }
    }
}
