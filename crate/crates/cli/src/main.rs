//! `vbackend`: batch driver for the speaker-verification back-end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "vbackend", version, about = "Speaker-verification back-end toolkit")]
struct Cli {
    /// key=value file supplying flag values; command-line flags win.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Worker threads for data-parallel work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic labeled corpus, trials and oracle scores.
    Synth(SynthArgs),
    /// Fit center/CORAL/whiten/LDA as one affine transform.
    TransformFit(TransformFitArgs),
    /// Apply a transform, optionally length-normalizing afterwards.
    TransformApply(TransformApplyArgs),
    /// Concatenate embeddings of the same segments from several extractors.
    Stack(StackArgs),
    /// Train a two-covariance PLDA model by EM, optionally adapting it.
    PldaTrain(PldaTrainArgs),
    /// Interpolate out-of-domain and in-domain PLDA models.
    PldaInterp(PldaInterpArgs),
    /// Score trials with PLDA, pairwise or cosine scoring.
    Score(ScoreArgs),
    /// Adaptive S-norm or Cal-Norm against a cohort.
    Snorm(SnormArgs),
    /// Pairwise scorer equivalent to a PLDA model.
    PsvmInit(PsvmInitArgs),
    /// Refine a pairwise scorer on mined pairs with the smoothed DCF loss.
    PsvmTrain(PsvmTrainArgs),
    /// Affine calibration of one system (or apply a saved model).
    Calibrate(FuseArgs),
    /// Logistic-regression fusion with optional duration terms.
    Fuse(FuseArgs),
    /// EER, Cprimary and Cllr of a score file against a key.
    Evaluate(EvaluateArgs),
    /// Range of each subsystem's weighted contribution.
    Contributions(ContributionsArgs),
    /// Leave-one-subsystem-out fusion deltas on an evaluation key.
    Jackknife(JackknifeArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Embedding store (with labels and durations).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    key: Option<PathBuf>,
    #[arg(long)]
    trials: Option<PathBuf>,
    #[arg(long)]
    durations: Option<PathBuf>,
    /// `segment<TAB>domain` table.
    #[arg(long)]
    domains: Option<PathBuf>,
    #[arg(long)]
    oracle_scores: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    speakers: usize,
    #[arg(long, default_value_t = 10)]
    utts: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 1.0)]
    between: f64,
    #[arg(long, default_value_t = 1.0)]
    within: f64,
    /// Variance of the random domain shift; 0 disables it.
    #[arg(long, default_value_t = 0.0)]
    shift_scale: f64,
    #[arg(long, default_value_t = 0.5)]
    shifted_fraction: f64,
    /// Median duration in seconds.
    #[arg(long, default_value_t = 20.0)]
    duration_median: f64,
    #[arg(long, default_value_t = 0.7)]
    duration_log_sd: f64,
    /// Oracle scores get `+ probe_bias·log(d_p)`.
    #[arg(long, default_value_t = 0.0)]
    probe_bias: f64,
    /// Oracle scores get `+ reference_bias·log(d_r)`.
    #[arg(long, default_value_t = 0.0)]
    reference_bias: f64,
    #[arg(long, default_value_t = 1000)]
    targets: usize,
    #[arg(long, default_value_t = 10000)]
    nontargets: usize,
}

#[derive(Args)]
struct TransformFitArgs {
    #[arg(long)]
    train: PathBuf,
    /// In-domain set for CORAL.
    #[arg(long)]
    in_domain: Option<PathBuf>,
    #[arg(long)]
    center: bool,
    /// CORAL blend weight toward the in-domain covariance.
    #[arg(long)]
    coral: Option<f64>,
    /// Whitening ridge.
    #[arg(long)]
    whiten: Option<f64>,
    #[arg(long)]
    lda: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TransformApplyArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    transform: PathBuf,
    #[arg(long)]
    length_norm: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StackArgs {
    #[arg(long, required = true, action = clap::ArgAction::Append)]
    input: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PldaTrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long, default_value_t = 20)]
    iterations: usize,
    /// In-domain set to adapt the trained model toward.
    #[arg(long)]
    adapt: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    within_weight: f64,
    #[arg(long, default_value_t = 0.5)]
    between_weight: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PldaInterpArgs {
    #[arg(long)]
    out_domain: PathBuf,
    #[arg(long)]
    in_domain: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Plda,
    Psvm,
    Cosine,
}

#[derive(Args)]
struct ScorerArgs {
    #[arg(long, value_enum, default_value_t = Backend::Plda)]
    backend: Backend,
    /// PLDA or pairwise model file (not used for cosine).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    enroll: PathBuf,
    /// Probe embeddings (default: the enrollment store).
    #[arg(long)]
    probe: Option<PathBuf>,
    /// Multi-segment enrollment; models not listed are single segments.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
#[group(id = "trial_source", required = true, multiple = false)]
struct TrialSource {
    #[arg(long, group = "trial_source")]
    trials: Option<PathBuf>,
    #[arg(long, group = "trial_source")]
    key: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    scorer: ScorerArgs,
    #[command(flatten)]
    source: TrialSource,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormMethod {
    Snorm,
    Calnorm,
}

#[derive(Args)]
struct SnormArgs {
    #[command(flatten)]
    scorer: ScorerArgs,
    /// Raw scores to normalize.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long, default_value_t = 0.3)]
    top: f64,
    #[arg(long, value_enum, default_value_t = NormMethod::Snorm)]
    method: NormMethod,
    /// Cal-Norm mean weight.
    #[arg(long, default_value_t = 1.0)]
    a: f64,
    /// Cal-Norm standard-deviation weight.
    #[arg(long, default_value_t = 0.5)]
    b: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PsvmInitArgs {
    #[arg(long)]
    plda: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PsvmTrainArgs {
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long, default_value_t = 16)]
    n_same: usize,
    #[arg(long, default_value_t = 240)]
    n_impostor: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 4096)]
    batch_size: usize,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0.0)]
    momentum: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FuseArgs {
    /// Score files, one per subsystem; the file stem names the subsystem.
    #[arg(long, required = true, action = clap::ArgAction::Append)]
    scores: Vec<PathBuf>,
    /// Training key; without it `--model` is applied instead.
    #[arg(long)]
    key: Option<PathBuf>,
    /// Trial order for applying a model (default: first score file).
    #[arg(long, conflicts_with = "key")]
    trials: Option<PathBuf>,
    /// Saved fusion model to apply.
    #[arg(long, conflicts_with = "key")]
    model: Option<PathBuf>,
    /// Where to save the trained model.
    #[arg(long)]
    model_out: Option<PathBuf>,
    #[arg(long)]
    durations: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Train log-duration weights (needs --durations).
    #[arg(long)]
    use_durations: bool,
    #[arg(long, default_value_t = 0.01)]
    prior: f64,
    #[arg(long, default_value_t = 1e-6)]
    ridge: f64,
    /// Constant added to every output score.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    offset: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    key: PathBuf,
    /// Also report metrics averaged over key partitions.
    #[arg(long)]
    equalized: bool,
    /// DET points `(probit Pfa, probit Pmiss)` as TSV.
    #[arg(long)]
    det: Option<PathBuf>,
}

#[derive(Args)]
struct ContributionsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, required = true, action = clap::ArgAction::Append)]
    scores: Vec<PathBuf>,
    #[command(flatten)]
    source: TrialSource,
    #[arg(long)]
    durations: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct JackknifeArgs {
    #[arg(long, required = true, action = clap::ArgAction::Append)]
    train_scores: Vec<PathBuf>,
    #[arg(long)]
    train_key: PathBuf,
    #[arg(long, required = true, action = clap::ArgAction::Append)]
    eval_scores: Vec<PathBuf>,
    #[arg(long)]
    eval_key: PathBuf,
    #[arg(long)]
    durations: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    use_durations: bool,
    #[arg(long, default_value_t = 0.01)]
    prior: f64,
    #[arg(long, default_value_t = 1e-6)]
    ridge: f64,
}

fn main() -> ExitCode {
    let args = match config::merge(std::env::args_os().collect(), &Cli::command()) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    let sub = args
        .iter()
        .skip(1)
        .find_map(|a| Cli::command().find_subcommand(a.to_string_lossy().as_ref()).map(|c| c.get_name().to_string()));
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(cli.command, cli.seed) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            let mut root = Cli::command().bin_name("vbackend");
            root.build();
            if let Some(cmd) = sub.and_then(|n| root.find_subcommand_mut(&n)) {
                eprintln!("\n{}", cmd.render_usage());
            }
            ExitCode::from(1)
        }
        Err(commands::Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
