//! Command-line front end for frozen planet orbit computations.

mod artifacts;
mod commands;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit statuses.
pub mod exit {
    pub const OK: u8 = 0;
    pub const SOLVER: u8 = 2;
    pub const INVARIANT: u8 = 3;
    pub const INCONCLUSIVE: u8 = 4;
    pub const USAGE: u8 = 64;
    pub const DATA: u8 = 65;
    pub const IO: u8 = 74;
}

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }

    pub fn usage(msg: impl std::fmt::Display) -> Self {
        Self::new(exit::USAGE, anyhow::anyhow!("{msg}"))
    }

    pub fn data(msg: impl std::fmt::Display) -> Self {
        Self::new(exit::DATA, anyhow::anyhow!("{msg}"))
    }

    pub fn io(e: anyhow::Error) -> Self {
        Self::new(exit::IO, e)
    }

    /// Maps library errors onto exit statuses.
    pub fn core(e: frozen_orbit::Error) -> Self {
        use frozen_orbit::Error as E;
        let code = match &e {
            E::Config(_) => exit::USAGE,
            E::Malformed(_) | E::Json(_) | E::Csv(_) | E::Shape(_) => exit::DATA,
            E::Io(_) => exit::IO,
            _ => exit::SOLVER,
        };
        Self::new(code, e)
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "frozen-orbit",
    version,
    about = "Frozen planet orbits of the one-dimensional n-electron atom"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Solve the segmented brake problem and fold it.
    Brake(BrakeArgs),
    /// Compute one frozen planet orbit.
    Solve(SolveArgs),
    /// Continue a solution in `mu` or in the smoothing radius.
    Sweep(SweepArgs),
    /// Check the structural assumptions of a potential family.
    Check(CheckArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Preset name or path to a family JSON file.
    #[arg(long)]
    pub family: String,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Mesh: `m[:p]`, `m:p0:p1`, `geo:h0:ratio:hmax[:h_end]` or `resolved`.
    #[arg(long)]
    pub mesh: Option<String>,
    /// Seed recorded in the manifest; the pipeline itself is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = "FROZEN_ORBIT_JOBS", default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Debug, Clone)]
pub struct BrakeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of segments; must match the family.
    #[arg(long)]
    pub n: Option<usize>,
    /// Segment length.
    #[arg(long = "T")]
    pub horizon: f64,
    #[arg(long, default_value_t = 0.0)]
    pub eps1: f64,
    #[arg(long, default_value_t = 0.0)]
    pub eps2: f64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Continue,
    Minmax,
}

#[derive(Args, Debug, Clone)]
pub struct SolveFlags {
    #[command(flatten)]
    pub common: Common,
    /// Half-period.
    #[arg(long = "T")]
    pub horizon: Option<f64>,
    /// Repulsion strength; defaults to the family's.
    #[arg(long)]
    pub mu: Option<f64>,
    /// Smoothing radius.
    #[arg(long, default_value_t = 1e-3)]
    pub eps: f64,
    /// JSON file with solver settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct SolveArgs {
    #[command(flatten)]
    pub flags: SolveFlags,
    #[arg(long, value_enum, default_value_t = Method::Continue)]
    pub method: Method,
    /// Comma-separated decreasing smoothing radii, ending at the target.
    #[arg(long, value_delimiter = ',')]
    pub eps_schedule: Option<Vec<f64>>,
    /// Linking radius for `minmax`.
    #[arg(long)]
    pub radius: Option<f64>,
    /// Also run the other method and record the action difference.
    #[arg(long)]
    pub cross_check: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Mu,
    Eps,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum PlotFormat {
    Svg,
}

#[derive(Args, Debug, Clone)]
pub struct SweepArgs {
    #[command(flatten)]
    pub flags: SolveFlags,
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated stage values.
    #[arg(long, value_delimiter = ',')]
    pub schedule: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    pub plot: Option<PlotFormat>,
}

#[derive(Args, Debug, Clone)]
pub struct CheckArgs {
    /// Preset name or path to a family JSON file.
    #[arg(long)]
    pub family: String,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
    /// Also write `check.json` and a manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                exit::USAGE
            } else {
                exit::OK
            };
        }
    };
    let recorded: Vec<String> = argv
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    let result = match cli.command {
        Command::Brake(a) => commands::brake(&a, recorded),
        Command::Solve(a) => commands::solve(&a, recorded),
        Command::Sweep(a) => commands::sweep(&a, recorded),
        Command::Check(a) => commands::check(&a, recorded),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            f.code
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os()))
}
