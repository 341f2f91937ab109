mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use espace::bench::BenchDtype;
use espace::{EspaceError, OrderingMode};

#[derive(Parser, Debug)]
#[command(name = "espace", version, about = "Activation projection compression for GEMM layers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct StageArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Artifact directory; overrides `paths.out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub ordering: Option<OrderingMode>,
    /// Overrides `rank.target_rate`.
    #[arg(long)]
    pub target_rate: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 4096)]
    pub k: usize,
    #[arg(long, default_value_t = 4096)]
    pub n: usize,
    #[arg(long, default_value_t = 2048)]
    pub m: usize,
    #[arg(long, default_value_t = 1024)]
    pub l: usize,
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    #[arg(long, default_value_t = 50)]
    pub warmup: usize,
    #[arg(long, default_value = "f32")]
    pub dtype: BenchDtype,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Splits each GEMM across the thread pool.
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Accumulate activation and gradient statistics on the calibration shard.
    Calibrate(StageArgs),
    /// Build candidate projections from calibration statistics.
    Build(StageArgs),
    /// Pick the best candidate per layer on validation data.
    Select(StageArgs),
    /// Rank layers and record the progressive compression curve.
    Sweep(StageArgs),
    /// Fold selected projections into a compressed model.
    Compress(StageArgs),
    /// Retrain the compressed model's weights with projections frozen.
    Heal(StageArgs),
    /// Report test-shard loss for every model on disk.
    Eval(StageArgs),
    /// Time one GEMM against the projected pair.
    BenchGemm(BenchArgs),
}

fn exit_code(e: &EspaceError) -> u8 {
    match e {
        EspaceError::Config { .. } | EspaceError::Policy(_) => 1,
        EspaceError::Numerical { .. } | EspaceError::Training(_) | EspaceError::Resource(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Calibrate(a) => commands::Stage::open(&a).and_then(|s| s.calibrate()),
        Command::Build(a) => commands::Stage::open(&a).and_then(|s| s.build()),
        Command::Select(a) => commands::Stage::open(&a).and_then(|s| s.select()),
        Command::Sweep(a) => commands::Stage::open(&a).and_then(|s| s.sweep()),
        Command::Compress(a) => commands::Stage::open(&a).and_then(|s| s.compress()),
        Command::Heal(a) => commands::Stage::open(&a).and_then(|s| s.heal()),
        Command::Eval(a) => commands::Stage::open(&a).and_then(|s| s.eval()),
        Command::BenchGemm(a) => commands::bench(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
