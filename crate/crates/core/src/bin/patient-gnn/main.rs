mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use patient_gnn::baselines::BaselineKind;
use patient_gnn::ehr::CodeKind;
use patient_gnn::gnn::LayerKind;
use patient_gnn::train::LossKind;
use serde::Serialize;

/// Heart-failure prediction on patient similarity graphs.
#[derive(Parser, Debug)]
#[command(name = "patient-gnn", version)]
pub struct Cli {
    /// TOML file whose keys mirror the flags; flags given here win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Root under which run directories are created.
    #[arg(long, global = true, env = "PATIENT_GNN_OUT", default_value = "runs", value_name = "DIR")]
    pub out_root: PathBuf,
    /// Write into this directory instead of `<out-root>/<command>-<run id>`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic cohort with code embeddings.
    Synth(SynthArgs),
    /// Label a cohort and average code embeddings into patient vectors.
    Represent(RepresentArgs),
    /// Build the cosine KNN similarity graph.
    Graph(GraphArgs),
    /// Assign train, validation and test masks.
    Split(SplitArgs),
    /// Train a GNN for three seeds.
    Train(TrainArgs),
    /// Score a checkpoint on one mask.
    Evaluate(EvaluateArgs),
    /// Compare the GNN with the baselines.
    Benchmark(BenchmarkArgs),
    /// Retrain with code kinds removed or isolated.
    Ablate(AblateArgs),
    /// Attention, graph and code-frequency analysis plus per-group dossiers.
    Interpret(InterpretArgs),
    /// ROC and PR curves as CSV.
    ExportCurves(CurveArgs),
    /// Synth through interpret in one run directory.
    Run(RunArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SynthOpts {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 4760)]
    pub patients: usize,
    #[arg(long, default_value_t = 0.2871)]
    pub positive_rate: f64,
    /// Strength of the label signal in [0, 1].
    #[arg(long, default_value_t = 0.7)]
    pub signal: f64,
    /// Signal weights of diagnosis, procedure and prescription codes.
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.2,1.0")]
    pub kind_signal: Vec<f64>,
    #[arg(long, default_value_t = 32)]
    pub embed_dim: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct HfOpts {
    /// ICD-9 diagnosis prefixes marking heart failure.
    #[arg(long, value_delimiter = ',', default_value = "428")]
    pub hf_prefix: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KRange {
    pub min: usize,
    pub max: usize,
}

impl FromStr for KRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (a, b) = s
            .split_once("..")
            .or_else(|| s.split_once('-'))
            .ok_or_else(|| format!("expected MIN..MAX, got {s:?}"))?;
        let p = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
        Ok(KRange { min: p(a)?, max: p(b.trim_start_matches('='))? })
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct KOpts {
    /// Neighbours per patient.
    #[arg(long, default_value_t = 3, conflicts_with = "select_k")]
    pub k: usize,
    /// Choose k by the k-means distortion elbow over MIN..MAX.
    #[arg(long, value_name = "MIN..MAX")]
    pub select_k: Option<KRange>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SplitOpts {
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', default_value = "0.6,0.2,0.2")]
    pub fractions: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Ignore labels when splitting.
    #[arg(long)]
    pub unstratified: bool,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ModelOpts {
    #[arg(long, default_value = "gt")]
    pub arch: LayerKind,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct LossOpts {
    #[arg(long, default_value = "focal")]
    pub loss: LossKind,
    #[arg(long, default_value_t = 0.75)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    /// WBCE positive weight; defaults to #negative / #positive on the train mask.
    #[arg(long)]
    pub pos_weight: Option<f64>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainOpts {
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    /// Epochs without validation F1 improvement before stopping (0 disables).
    #[arg(long, default_value_t = 30)]
    pub patience: usize,
    /// First of the three training seeds.
    #[arg(long, default_value_t = 0)]
    pub train_seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct InterpretOpts {
    /// Neighbourhood radius of the dossiers (1 or 2).
    #[arg(long, default_value_t = 2)]
    pub hops: usize,
    /// Seed for picking one test patient per group.
    #[arg(long, default_value_t = 0)]
    pub instance_seed: u64,
    /// Codes kept in the frequency table.
    #[arg(long, default_value_t = 30)]
    pub top_n: usize,
    /// Codes listed per dossier.
    #[arg(long, default_value_t = 15)]
    pub top_codes: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub synth: SynthOpts,
}

#[derive(Args, Debug, Serialize)]
pub struct RepresentArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Code kinds to average.
    #[arg(long, value_delimiter = ',', default_value = "diagnosis,procedure,prescription")]
    pub kinds: Vec<CodeKind>,
    #[command(flatten)]
    #[serde(flatten)]
    pub hf: HfOpts,
}

#[derive(Args, Debug, Serialize)]
pub struct GraphArgs {
    #[arg(long)]
    pub vectors: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub k: KOpts,
    /// Seed of the k-means runs behind --select-k.
    #[arg(long, default_value_t = 0)]
    pub kselect_seed: u64,
}

#[derive(Args, Debug, Serialize)]
pub struct SplitArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub split: SplitOpts,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Graph with masks, as written by `split`.
    #[arg(long)]
    pub graph: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub loss: LossOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainOpts,
}

#[derive(Args, Debug, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Mask to score: train, val or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Overrides the checkpoint's decision threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "logreg,knn,mlp,majority")]
    pub baselines: Vec<BaselineKind>,
    /// Neighbours of the KNN classifier.
    #[arg(long, default_value_t = 5)]
    pub knn_k: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub loss: LossOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainOpts,
}

#[derive(Args, Debug, Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Retrain without this code kind; repeatable.
    #[arg(long, required_unless_present = "only")]
    pub drop: Vec<CodeKind>,
    /// Retrain with only this code kind; repeatable.
    #[arg(long)]
    pub only: Vec<CodeKind>,
    #[command(flatten)]
    #[serde(flatten)]
    pub hf: HfOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub k: KOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub split: SplitOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub loss: LossOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainOpts,
}

#[derive(Args, Debug, Serialize)]
pub struct InterpretArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Cohort the graph was built from, for code profiles.
    #[arg(long)]
    pub cohort: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub hf: HfOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub interpret: InterpretOpts,
}

#[derive(Args, Debug, Serialize)]
pub struct CurveArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Args, Debug, Serialize)]
pub struct RunArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub synth: SynthOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub hf: HfOpts,
    #[arg(long, value_delimiter = ',', default_value = "diagnosis,procedure,prescription")]
    pub kinds: Vec<CodeKind>,
    #[command(flatten)]
    #[serde(flatten)]
    pub k: KOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub split: SplitOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub loss: LossOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub interpret: InterpretOpts,
    /// Also train and score the baselines.
    #[arg(long)]
    pub with_baselines: bool,
}

enum StartError {
    Usage(clap::Error),
    Config(patient_gnn::Error),
}

fn parse_cli() -> Result<Cli, StartError> {
    let mut root = Cli::command().args_override_self(true);
    root.build();
    let argv = config::expand(std::env::args_os().collect(), &root).map_err(StartError::Config)?;
    let matches = root.try_get_matches_from_mut(argv).map_err(StartError::Usage)?;
    Cli::from_arg_matches(&matches).map_err(StartError::Usage)
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match parse_cli() {
        Ok(cli) => cli,
        Err(StartError::Config(e)) => {
            eprintln!("error[{}]: {}", e.kind(), one_line(&e.to_string()));
            return ExitCode::FAILURE;
        }
        Err(StartError::Usage(e)) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {}", one_line(first));
            return ExitCode::FAILURE;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match commands::dispatch(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
