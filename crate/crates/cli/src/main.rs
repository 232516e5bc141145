//! `usqm`: ultrasound image quality metrics, degradation synthesis and
//! evaluation.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |---|---|
//! | 0 | success |
//! | 1 | internal error |
//! | 2 | I/O failure or unreadable artifact |
//! | 3 | shape, configuration or usage error, unknown organ, extractor mismatch |
//! | 4 | insufficient data or undefined statistic |
//! | 5 | PSNR target unreachable or non-monotone severity sweep |
//! | 6 | schema violation in an input manifest or table |

mod cmd;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use usqm_core::error::Error;

#[derive(Parser, Debug)]
#[command(name = "usqm", version, about = "Ultrasound image quality in transformer feature space")]
pub struct Cli {
    /// JSON config file; explicit flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Feature extractor: builtin-seeded:<seed> or external:<features-file>.
    #[arg(long, global = true)]
    extractor: Option<String>,

    /// Maximum number of images processed concurrently.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Print the resolved configuration and its hash, then exit.
    #[arg(long, global = true)]
    print_config: bool,

    /// More diagnostics on stderr (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Full-reference distance between a reference and a test image.
    FrScore(FrScoreArgs),
    /// No-reference quality: fit organ banks and score images.
    #[command(subcommand)]
    Nrq(NrqCommand),
    /// Apply distortions at a severity or a calibrated PSNR.
    Degrade(DegradeArgs),
    /// Generate seeded speckle phantoms and a fitting manifest.
    Phantom(PhantomArgs),
    /// Run an evaluation protocol and write JSON and Markdown reports.
    Eval(EvalArgs),
    /// Blinded 2AFC study tools.
    #[command(subcommand)]
    Study(StudyCommand),
}

#[derive(Args, Debug, Default)]
pub struct FrOverrides {
    /// Comma-separated transformer layer indices.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    /// Neighbourhood radius in tokens.
    #[arg(long)]
    radius: Option<usize>,
    /// Softmax temperature.
    #[arg(long)]
    temperature: Option<f64>,
    /// Stride of 224x224 windows on larger images.
    #[arg(long)]
    window_stride: Option<usize>,
}

#[derive(Args, Debug)]
pub struct FrScoreArgs {
    reference: PathBuf,
    test: PathBuf,
    #[command(flatten)]
    fr: FrOverrides,
    /// Also report the token perceptual loss value.
    #[arg(long)]
    token_loss: bool,
}

#[derive(Args, Debug, Default)]
pub struct NrOverrides {
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    /// PCA dimension.
    #[arg(long)]
    pca_dim: Option<usize>,
    /// Mixture components per organ.
    #[arg(long)]
    components: Option<usize>,
    /// EM initialization seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of lowest-scoring patches averaged into the final score.
    #[arg(long)]
    worst_fraction: Option<f64>,
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum NrqCommand {
    /// Fit the shared PCA and per-organ mixtures on clean images.
    Fit(NrqFitArgs),
    /// Score images against a bank; one JSON line per image.
    Score(NrqScoreArgs),
}

#[derive(Args, Debug)]
pub struct NrqFitArgs {
    /// JSON lines of {"path", "organ"}; paths relative to the manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Output bank file.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    nr: NrOverrides,
}

#[derive(Args, Debug)]
pub struct NrqScoreArgs {
    /// Bank file from `nrq fit`.
    #[arg(long)]
    bank: PathBuf,
    /// Image file or directory of PNG/PGM images.
    input: PathBuf,
    /// Score against one organ's model instead of the uniform mixture.
    #[arg(long)]
    organ: Option<String>,
    /// Score even when the extractor fingerprint differs from the bank's.
    #[arg(long)]
    allow_fingerprint_mismatch: bool,
    /// Write JSON lines here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DegradeArgs {
    /// Image file or directory of PNG/PGM images.
    input: PathBuf,
    /// Comma-separated kinds, or `all` for the standard eight.
    #[arg(long, value_delimiter = ',', default_value = "all")]
    kind: Vec<String>,
    /// Calibrate severity to these PSNR targets (dB).
    #[arg(long, value_delimiter = ',', conflicts_with = "theta", required_unless_present = "theta")]
    target_psnr: Option<Vec<f64>>,
    /// Fixed severity.
    #[arg(long)]
    theta: Option<f64>,
    /// Calibration tolerance in dB.
    #[arg(long, default_value_t = 0.05)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; `degradations.json` there is created or extended.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 224)]
    height: usize,
    #[arg(long, default_value_t = 224)]
    width: usize,
    /// default, fine or coarse.
    #[arg(long, default_value = "default")]
    style: String,
    /// Seed of the first phantom; later ones use consecutive seeds.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Organ label written to `manifest.jsonl` in the output directory.
    #[arg(long)]
    organ: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// task-anchor, cross-organ, nr-monotonicity or afc-agreement.
    protocol: String,
    /// Input tables; afc-agreement takes pair manifest, responses, scores.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = 0.5)]
    p0: f64,
    /// Seeds behind the inputs, recorded in the report.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum StudyCommand {
    /// Build a blinded pair manifest from `degradations.json`.
    Pairgen(PairgenArgs),
    /// Serve the study API and UI assets.
    Serve(ServeArgs),
    /// Agreement of NRQ-predicted preferences with recorded choices.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
pub struct PairgenArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 540)]
    n_pairs: usize,
    #[arg(long, default_value_t = 0.1)]
    sanity_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum PSNR gap of a cross pair (dB).
    #[arg(long, default_value_t = 0.1)]
    psnr_tolerance: f64,
    /// Duplicate pairs per reader session.
    #[arg(long, default_value_t = 1)]
    duplicates: usize,
    /// Sample uniformly instead of round-robin over kind pairs.
    #[arg(long)]
    unbalanced: bool,
    /// Comma-separated reader ids to allocate pairs to.
    #[arg(long, value_delimiter = ',')]
    readers: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pairs: PathBuf,
    /// Append-only response log (JSON lines).
    #[arg(long)]
    responses: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Built study UI directory mounted at `/`.
    #[arg(long)]
    assets: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    responses: PathBuf,
    /// JSON lines from `nrq score`.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. }
        | Error::Image { .. }
        | Error::Decode(_)
        | Error::UnsupportedVersion(_)
        | Error::CorruptModel(_) => 2,
        Error::Shape(_)
        | Error::Range(_)
        | Error::Parameter(_)
        | Error::UnknownOrgan(_)
        | Error::FingerprintMismatch { .. } => 3,
        Error::InsufficientData(_) | Error::Undefined(_) => 4,
        Error::Unreachable { .. } | Error::NonMonotone { .. } => 5,
        Error::Schema { .. } | Error::Json(_) => 6,
        Error::Conflict(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(3) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    match cmd::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
