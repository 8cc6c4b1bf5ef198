use std::path::PathBuf;
use std::process::ExitCode;

use batchquad::experiments::{run_experiment, ExperimentKind, ExperimentSpec, Method};
use batchquad::Error;
use clap::error::ErrorKind;
use clap::Parser;

const EXIT_ARGUMENT: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_IO: u8 = 4;

/// Runs batch Bayesian quadrature benchmarks and writes a CSV trace.
#[derive(Debug, Parser)]
#[command(name = "batchquad", version)]
struct Args {
    /// inmodel, mixture or evidence
    experiment: ExperimentKind,

    /// Comma-separated batch sizes.
    #[arg(long, value_delimiter = ',', required = true)]
    batch_size: Vec<usize>,

    /// Comma-separated methods: kb, lp, mh, prior-mc.
    #[arg(long, value_delimiter = ',', required = true)]
    method: Vec<Method>,

    /// Total integrand evaluations per run, initial design included.
    #[arg(long)]
    budget: Option<usize>,

    #[arg(long, default_value_t = 1)]
    runs: usize,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    #[arg(long)]
    out: PathBuf,

    #[arg(long, default_value_t = 0.8)]
    min_fraction: f64,

    #[arg(long, default_value_t = 0.5)]
    slope_fraction: f64,

    #[arg(long, default_value_t = -6, allow_hyphen_values = true)]
    p: i32,

    #[arg(long, default_value_t = 501)]
    grid_res: usize,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Argument(_) => EXIT_ARGUMENT,
        Error::Io { .. } | Error::Csv(_) => EXIT_IO,
        _ => EXIT_NUMERICAL,
    }
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_ARGUMENT),
            };
        }
    };
    let mut spec = ExperimentSpec::new(args.experiment, args.batch_size, args.method, args.runs, args.seed);
    if let Some(b) = args.budget {
        spec.budget = b;
    }
    spec.output_path = Some(args.out);
    spec.min_fraction = args.min_fraction;
    spec.slope_fraction = args.slope_fraction;
    spec.p = args.p;
    spec.grid_res = args.grid_res;
    match run_experiment(&spec) {
        Ok(rows) => {
            eprintln!("wrote {} rows", rows.len());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
