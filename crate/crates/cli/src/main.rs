//! `eyedeg`: data generation, training, fine-tuning, evaluation, inference,
//! blink-curve analysis and gradient checks.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eyedeg::Error;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "eyedeg", version, about = "Degree-of-eye-openness estimation from eye crops")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a labeled dataset or a blink sequence
    Gen(GenArgs),
    /// Train a network
    Train(TrainArgs),
    /// Fine-tune a checkpoint on degree-labeled pseudo-real crops
    Finetune(FinetuneArgs),
    /// Score a checkpoint on a dataset
    Eval(EvalArgs),
    /// Train-source by test-domain result table
    Matrix(MatrixArgs),
    /// Estimate the degree of openness of one image
    Infer(InferArgs),
    /// Analyse predictions over a blink sequence
    Curve(CurveArgs),
    /// Check every gradient against finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct GenArgs {
    /// syn, real, realprime or blink
    #[arg(long)]
    pub domain: Option<String>,
    /// Number of samples [default: 100]
    #[arg(long)]
    pub count: Option<usize>,
    /// Dataset seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Cycle through the openness states by index instead of drawing them
    #[arg(long)]
    pub stratified: bool,
    /// Comma-separated openness states replacing the domain defaults
    #[arg(long)]
    pub openness: Option<String>,
    /// Blink pattern: close-open or close-open-close-open [default: close-open-close-open]
    #[arg(long)]
    pub pattern: Option<String>,
    /// Blink frames [default: 100]
    #[arg(long)]
    pub frames: Option<usize>,
    /// Blink subject id [default: 104]
    #[arg(long)]
    pub subject: Option<u32>,
    /// Blink rendering style: syn or real [default: real]
    #[arg(long)]
    pub style: Option<String>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Flat key = value file; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Flags overriding training configuration keys.
#[derive(Args, Debug, Serialize, Default)]
pub struct TrainOverrides {
    /// Learning rate [default: 0.0001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epochs [default: 80]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Batch size [default: 256]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Share of real samples per joint batch [default: 0.25]
    #[arg(long)]
    pub real_fraction: Option<f64>,
    /// Weight of the synthetic degree loss [default: 0.01]
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Weight of the real open/closed loss [default: 1]
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Weight of the feature distribution loss [default: 1]
    #[arg(long)]
    pub lambda3: Option<f64>,
    /// Openness threshold [default: 15]
    #[arg(long)]
    pub ot: Option<f64>,
    /// Seed for initialization and shuffling [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Adam beta1 [default: 0.9]
    #[arg(long)]
    pub beta1: Option<f64>,
    /// Adam beta2 [default: 0.999]
    #[arg(long)]
    pub beta2: Option<f64>,
    /// Adam epsilon [default: 0.00000001]
    #[arg(long)]
    pub eps: Option<f64>,
    /// Epoch from which the learning rate is decayed, or "none" [default: none]
    #[arg(long)]
    pub lr_decay_epoch: Option<String>,
    /// Learning-rate decay factor [default: 0.1]
    #[arg(long)]
    pub lr_decay_factor: Option<f64>,
    /// Network preset: desk, compact or tiny [default: desk]
    #[arg(long)]
    pub net: Option<String>,
    /// Pool synthetic crops into fine-tuning batches [default: false]
    #[arg(long)]
    pub finetune_with_syn: Option<bool>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// joint, syn or real [default: joint]
    #[arg(long)]
    pub mode: Option<String>,
    /// Degree-labeled synthetic dataset directory
    #[arg(long)]
    pub syn: Option<PathBuf>,
    /// Binary-labeled pseudo-real dataset directory
    #[arg(long)]
    pub real: Option<PathBuf>,
    /// Flat key = value file; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to write
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Args, Debug, Serialize)]
pub struct FinetuneArgs {
    /// Checkpoint to start from
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Degree-labeled pseudo-real dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Synthetic dataset pooled in when finetune_with_syn is set
    #[arg(long)]
    pub syn: Option<PathBuf>,
    /// Flat key = value file; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to write
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Score only this part of the fine-tuning split: train or test
    #[arg(long)]
    pub split: Option<String>,
    /// Openness threshold
    #[arg(long, default_value_t = 15.0)]
    pub ot: f64,
    /// Report file
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct MatrixArgs {
    /// Training source and checkpoint as NAME=PATH; repeatable
    #[arg(long = "ckpt", required = true)]
    pub ckpts: Vec<String>,
    /// Test domain and dataset as NAME=DIR; repeatable
    #[arg(long = "data", required = true)]
    pub data: Vec<String>,
    #[arg(long, default_value_t = 15.0)]
    pub ot: f64,
    /// Output prefix; writes PREFIX.json and PREFIX.txt
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// PGM/PPM image; a ready 48x128 crop unless landmarks are given
    #[arg(long)]
    pub image: PathBuf,
    /// JSON {"left":[x,y],"right":[x,y]} with the outer eye corners
    #[arg(long)]
    pub landmarks: Option<PathBuf>,
    #[arg(long, default_value_t = 15.0)]
    pub ot: f64,
    /// Also write the result to this file
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct CurveArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Blink sequence directory
    #[arg(long)]
    pub seq: PathBuf,
    #[arg(long, default_value_t = 15.0)]
    pub ot: f64,
    /// Output prefix; writes PREFIX.csv, PREFIX.svg and PREFIX.json
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the report to this file
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Data(_) => 2,
        Error::Io { .. } | Error::Load(_) => 3,
        Error::Numeric(_) | Error::Oracle(_) => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::new().filter_level(log::LevelFilter::Info).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Eval(a) => commands::eval(a),
        Command::Matrix(a) => commands::matrix(a),
        Command::Infer(a) => commands::infer(a),
        Command::Curve(a) => commands::curve(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
