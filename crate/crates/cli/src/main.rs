//! `irisnet`: pretrain, fine-tune, evaluate and inspect few-shot residual
//! classifiers on directory-per-class image corpora.

mod commands;
mod failure;
mod settings;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use settings::{CommonOpts, DataOpts, OcclusionOpts, TrainOpts};

#[derive(Parser, Debug)]
#[command(
    name = "irisnet",
    version,
    about = "Few-shot image identity recognition with residual CNNs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from random initialization on a source corpus
    Pretrain(PretrainArgs),
    /// Load pretrained weights, replace the head and train on a target corpus
    Finetune(FinetuneArgs),
    /// Report test accuracy, overall and per class
    Eval(EvalArgs),
    /// Occlusion-sensitivity maps for every image of a corpus
    Saliency(SaliencyArgs),
    /// Write a synthetic ring-texture corpus as PPM files
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: CommonOpts,
    #[command(flatten)]
    pub data: DataOpts,
    #[command(flatten)]
    pub train: TrainOpts,
    /// resnet_micro (32×32 input), resnet50 (224×224 input), or a model spec file [default: resnet50]
    #[arg(long)]
    pub model: Option<String>,
    /// Where to save the best checkpoint [default: <out-dir>/weights.bin]
    #[arg(long)]
    pub weights_out: Option<std::path::PathBuf>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: CommonOpts,
    #[command(flatten)]
    pub data: DataOpts,
    #[command(flatten)]
    pub train: TrainOpts,
    /// Pretrained weight file (required)
    #[arg(long)]
    pub weights_in: Option<std::path::PathBuf>,
    /// Where to save the best checkpoint [default: <out-dir>/weights.bin]
    #[arg(long)]
    pub weights_out: Option<std::path::PathBuf>,
    /// feature_extractor (train the new head only) or full_finetune [default: full_finetune]
    #[arg(long)]
    pub freeze_mode: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonOpts,
    #[command(flatten)]
    pub data: DataOpts,
    /// Weight file to evaluate (required)
    #[arg(long)]
    pub weights_in: Option<std::path::PathBuf>,
}

#[derive(Args, Debug)]
pub struct SaliencyArgs {
    #[command(flatten)]
    pub common: CommonOpts,
    /// Images laid out as <root>/<class>/<image>.ppm|pgm; the directory name gives the true class (required)
    #[arg(long)]
    pub data_root: Option<std::path::PathBuf>,
    /// Weight file (required)
    #[arg(long)]
    pub weights_in: Option<std::path::PathBuf>,
    #[command(flatten)]
    pub occlusion: OcclusionOpts,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonOpts,
    /// Number of classes [default: 20]
    #[arg(long)]
    pub classes: Option<usize>,
    /// Images per class [default: 10]
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Image side in pixels [default: 32]
    #[arg(long)]
    pub size: Option<usize>,
    /// Index of the first class signature; disjoint ranges give disjoint classes [default: 0]
    #[arg(long)]
    pub class_offset: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Finetune(a) => commands::finetune(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Saliency(a) => commands::saliency(&a),
        Command::Synth(a) => commands::synth(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
