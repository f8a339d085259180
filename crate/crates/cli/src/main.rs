use std::path::PathBuf;
use std::process::ExitCode;

use a2r_core::ann::Probe;
use a2r_core::imaging::{parse_scales, ScaleSpec};
use a2r_core::objectives::CycleNorm;
use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "a2r", version, about = "Memory-bank contextual loss toolkit")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "A2R_THREADS", value_parser = clap::value_parser!(u32).range(1..))]
    threads: Option<u32>,

    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract patches from a corpus and write one indexed bank per class and scale.
    BuildBank(BuildBankArgs),
    /// Describe a bank file.
    BankInfo(BankInfoArgs),
    /// k-nearest-neighbor queries against one bank.
    Search(SearchArgs),
    /// Multi-scale contextual loss of an image.
    CxLoss(CxLossArgs),
    /// Optimize an image's pixels against the banks.
    Realify(RealifyArgs),
    /// Frechet distance between two feature sets.
    Fid(FidArgs),
    /// Mean entropy of class-probability rows.
    Entropy(EntropyArgs),
    /// Evaluate the training objectives on synthetic inputs.
    Losses(LossesArgs),
}

/// Parsed as one value so clap does not treat it as a repeated flag.
type Scales = Vec<ScaleSpec>;

fn scales(s: &str) -> Result<Scales, String> {
    parse_scales(s).map_err(|e| e.to_string())
}

fn probe(s: &str) -> Result<Probe, String> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(Probe::All);
    }
    match s.parse::<usize>() {
        Ok(n) if n > 0 => Ok(Probe::Lists(n)),
        _ => Err(format!("expected `all` or a positive count, got `{s}`")),
    }
}

fn count(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(format!("expected a positive count, got `{s}`")),
    }
}

fn cycle_norm(s: &str) -> Result<CycleNorm, String> {
    s.parse::<CycleNorm>().map_err(|e| e.to_string())
}

fn unit_interval(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v <= 1.0 => Ok(v),
        _ => Err(format!("expected a value in (0, 1], got `{s}`")),
    }
}

fn positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a positive number, got `{s}`")),
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a non-negative number, got `{s}`")),
    }
}

#[derive(Args, Debug)]
struct BuildBankArgs {
    /// Directory of PNG/PPM images.
    #[arg(long)]
    images: PathBuf,
    /// Directory with one `<image stem>/<class>.png` mask folder per image.
    #[arg(long)]
    masks: Option<PathBuf>,
    #[arg(long, alias = "scale", value_parser = scales, default_value = "4x4:4,8x8:5,16x16:6")]
    scales: Scales,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Minimum mask coverage for a patch to join a class.
    #[arg(long, value_parser = unit_interval, default_value_t = a2r_core::imaging::DEFAULT_COVERAGE)]
    coverage: f64,
    /// Bank size at which PCA and quantization kick in.
    #[arg(long, default_value_t = a2r_core::bank::DEFAULT_PCA_THRESHOLD)]
    pca_threshold: usize,
    /// Retained PCA components (default min(64, dim)).
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pca_dim: Option<u32>,
    #[arg(long)]
    force_pca: bool,
    #[arg(long)]
    quantize: bool,
    /// Inverted lists per index (default ceil(sqrt(N))).
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    nlist: Option<u32>,
}

#[derive(Args, Debug)]
struct BankInfoArgs {
    bank: PathBuf,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[arg(long)]
    bank: PathBuf,
    /// Feature file of raw query patches.
    #[arg(long)]
    query: PathBuf,
    #[arg(long, default_value_t = a2r_core::ann::DEFAULT_K, value_parser = count)]
    k: usize,
    /// `all` or a list count.
    #[arg(long, value_parser = probe)]
    nprobe: Option<Probe>,
    /// Brute-force scan instead of the index.
    #[arg(long)]
    exact: bool,
}

#[derive(Args, Debug)]
struct LossArgs {
    #[arg(long)]
    image: PathBuf,
    /// Mask directory of `<class>.png` files.
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Bank directory.
    #[arg(long)]
    banks: PathBuf,
    /// Defaults to every scale present in the bank directory.
    #[arg(long, value_parser = scales)]
    scales: Option<Scales>,
    #[arg(long, value_parser = positive, default_value_t = a2r_core::cxloss::DEFAULT_BANDWIDTH)]
    h: f64,
    #[arg(long, default_value_t = a2r_core::ann::DEFAULT_K, value_parser = count)]
    k: usize,
    #[arg(long, value_parser = probe)]
    nprobe: Option<Probe>,
    #[arg(long, value_parser = unit_interval, default_value_t = a2r_core::imaging::DEFAULT_COVERAGE)]
    coverage: f64,
    #[arg(long)]
    stop_grad_min: bool,
}

#[derive(Args, Debug)]
struct CxLossArgs {
    #[command(flatten)]
    loss: LossArgs,
    /// Dense evaluation against every bank vector.
    #[arg(long)]
    exact: bool,
    /// Write the pixel gradient as a feature file (one row per pixel).
    #[arg(long)]
    grad_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RealifyArgs {
    #[command(flatten)]
    loss: LossArgs,
    #[arg(long, default_value_t = 500, value_parser = count)]
    steps: usize,
    #[arg(long, value_parser = positive, default_value_t = 0.0002)]
    lr: f64,
    #[arg(long, value_parser = non_negative, default_value_t = 0.01)]
    content_weight: f64,
    #[arg(long, default_value_t = 30)]
    patience: usize,
    /// Output PNG.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-step CSV trace.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FidArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
}

#[derive(Args, Debug)]
struct EntropyArgs {
    #[arg(long)]
    probs: PathBuf,
}

#[derive(Args, Debug)]
struct LossesArgs {
    #[arg(long, required = true)]
    demo: bool,
    #[arg(long, value_parser = cycle_norm, default_value = "l1")]
    cycle_norm: CycleNorm,
    #[arg(long, value_parser = non_negative, default_value_t = a2r_core::objectives::DEFAULT_LAMBDA_CX)]
    lambda_cx: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n as usize)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
