use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use stwp_bench::{repro_simulation, study_config, write_report, Scale};

/// Reproduces the simulation study and writes markdown and CSV tables.
#[derive(Debug, Parser)]
struct Args {
    #[arg(long, value_enum, default_value = "desk")]
    scale: Scale,
    #[arg(long, default_value = "repro")]
    out: PathBuf,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    n_iter: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let mut cfg = study_config(args.scale);
    if let Some(n) = args.replicates {
        cfg.replicates = n;
    }
    if let Some(n) = args.n_iter {
        cfg.mcmc.n_iter = n;
        cfg.mcmc.n_warmup = n / 2;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let report = match repro_simulation(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if let Err(e) = write_report(&args.out, &report) {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code() as u8);
    }
    print!("{}", stwp_bench::markdown(&report));
    ExitCode::SUCCESS
}
