mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use config::UsageError;

/// Diffusion-generated video detection on a synthetic toy corpus.
#[derive(Parser)]
#[command(name = "mmdet", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate procedural real clips and a manifest.
    GenCorpus(GenCorpusArgs),
    /// Train the VQ-VAE on the real training clips of a corpus.
    TrainVqvae(TrainVqvaeArgs),
    /// Write one VQ-VAE fake per real clip, plus a combined manifest.
    GenFakes(GenFakesArgs),
    /// Train a detector.
    Train(TrainArgs),
    /// Score a manifest under several evaluation seeds.
    Eval(EvalArgs),
    /// Apply a perturbation to every clip of a corpus.
    Perturb(PerturbArgs),
    /// Train and test the ablation rows enabled by a flag set.
    Ablate(AblateArgs),
    /// Two-cluster k-means accuracy per feature layer.
    Probe(ProbeArgs),
    /// Write mock multi-modal features for every clip of a manifest.
    ExportFeaturesMock(ExportArgs),
}

#[derive(Args)]
struct Common {
    /// key=value config file; flags given on the command line override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed (required here or in the config file)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenCorpusArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Number of real clips
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Frames per clip
    #[arg(long, default_value_t = 16)]
    frames: usize,
    /// Frame height and width
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 8.0)]
    fps: f32,
    /// Per-pixel grain amplitude
    #[arg(long, default_value_t = 0.01)]
    grain: f64,
}

#[derive(Args)]
struct TrainVqvaeArgs {
    #[command(flatten)]
    common: Common,
    /// Corpus directory or manifest
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output checkpoint
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1200)]
    vq_steps: usize,
    #[arg(long, default_value_t = 16)]
    vq_batch: usize,
    #[arg(long, default_value_t = 2e-3)]
    vq_lr: f64,
    #[arg(long, default_value_t = 64)]
    codebook_size: usize,
    #[arg(long, default_value_t = 16)]
    latent_dim: usize,
    /// Commitment weight
    #[arg(long, default_value_t = 0.25)]
    beta: f32,
}

#[derive(Args)]
struct GenFakesArgs {
    #[command(flatten)]
    common: Common,
    /// Corpus directory or manifest holding the real clips
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// VQ-VAE checkpoint
    #[arg(long)]
    vqvae: Option<PathBuf>,
    /// Fraction of latent positions re-drawn uniformly from the codebook
    #[arg(long, default_value_t = 0.2)]
    jitter: f64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    /// Corpus directory or manifest with real and fake clips
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// VQ-VAE checkpoint used for reconstructions
    #[arg(long)]
    vqvae: Option<PathBuf>,
    /// Feature provider: mock or file
    #[arg(long, default_value = "mock")]
    provider: String,
    /// Label signal strength of the mock provider
    #[arg(long, default_value_t = 1.0)]
    sigma: f32,
    /// Feature file for the file provider
    #[arg(long)]
    features: Option<PathBuf>,
    /// Seed of the mock feature space
    #[arg(long, default_value_t = 0)]
    provider_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// Output detector checkpoint
    #[arg(long)]
    out: PathBuf,
    /// Optional metrics log (step,loss,val_auc)
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Enabled modules, comma separated subset of recon,iafa,mmfr,fusion
    #[arg(long, default_value = "recon,iafa,mmfr,fusion")]
    flags: String,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 10)]
    clip_len: usize,
    #[arg(long, default_value_t = 32)]
    crop: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Config file; values stored in the checkpoint fill unset keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// Detector checkpoint
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Corpus directory or manifest to score
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Evaluation seeds; each picks the first-window offset per video
    #[arg(long, default_value = "1,100,999,1234,9999")]
    seeds: String,
    /// Manifest split to score, or all
    #[arg(long, default_value = "test")]
    split: String,
    /// Window stride; 0 means the clip length
    #[arg(long, default_value_t = 0)]
    stride: usize,
    /// Report CSV
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PerturbArgs {
    /// Input corpus directory or manifest
    #[arg(long = "in")]
    input: PathBuf,
    /// blur, resize, rotate or mixed
    #[arg(long)]
    kind: String,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// Module set; every table row using only these modules is run
    #[arg(long, default_value = "recon,iafa,mmfr,fusion")]
    flags: String,
    #[arg(long, default_value = "1,100,999,1234,9999")]
    seeds: String,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Table CSV
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    common: Common,
    /// Feature CSV (id,label,f_0..), one file per layer in order
    #[arg(long, required = true)]
    features: Vec<PathBuf>,
    /// Probe CSV (layer,accuracy)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    common: Common,
    /// Corpus directory or manifest
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Label signal strength
    #[arg(long, default_value_t = 1.0)]
    sigma: f32,
    /// Seconds between cached frames
    #[arg(long, default_value_t = 6.0)]
    interval: f64,
    /// Output feature file
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<UsageError> for Failure {
    fn from(e: UsageError) -> Self {
        Failure::Usage(e.0)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<UsageError>() {
            Ok(u) => Failure::Usage(u.0),
            Err(e) => Failure::Runtime(format!("{e:#}")),
        }
    }
}

fn run(cmd: Command, sub: &ArgMatches) -> Result<(), Failure> {
    use commands as c;
    let with = |file: Option<&PathBuf>| config::resolve(file.map(PathBuf::as_path), sub);
    match cmd {
        Command::GenCorpus(a) => c::guarded(&a.out, || c::gen_corpus(&with(a.common.config.as_ref())?, &a.out))?,
        Command::TrainVqvae(a) => c::guarded(&a.out, || c::train_vqvae(&with(a.common.config.as_ref())?, &a.out))?,
        Command::GenFakes(a) => c::guarded(&a.out, || c::gen_fakes(&with(a.common.config.as_ref())?, &a.out))?,
        Command::Train(a) => {
            let kv = with(a.common.config.as_ref())?;
            let metrics = a.metrics.clone();
            c::guarded(&a.out, || c::train(&kv, &a.out, metrics.as_deref()))?
        }
        Command::Eval(a) => c::guarded(&a.out, || c::eval(&with(a.config.as_ref())?, &a.out))?,
        Command::Perturb(a) => c::guarded(&a.out, || c::perturb(&with(None)?, &a.out))?,
        Command::Ablate(a) => c::guarded(&a.out, || c::ablate(&with(a.common.config.as_ref())?, &a.out))?,
        Command::Probe(a) => c::guarded(&a.out, || c::probe(&with(a.common.config.as_ref())?, &a.features, &a.out))?,
        Command::ExportFeaturesMock(a) => {
            c::guarded(&a.out, || c::export_features_mock(&with(a.common.config.as_ref())?, &a.out))?
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    match run(cli.cmd, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
