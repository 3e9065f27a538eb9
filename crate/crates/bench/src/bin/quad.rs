use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use stwp_bench::{bench_quadrature, machine, regressions, QuadratureCase, QuadratureTiming};

/// Times buffer indexing and one predictor pass at several window sizes.
#[derive(Debug, Parser)]
struct Args {
    /// Radii to time; the lag is half the radius.
    #[arg(long, value_delimiter = ',', default_values_t = [5.0, 10.0, 15.0, 20.0])]
    radii: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    grid_step: f64,
    /// Earlier timings to compare against.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Where to store these timings.
    #[arg(long)]
    save: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let cases: Vec<QuadratureCase> = args
        .radii
        .iter()
        .map(|&r| QuadratureCase {
            radius: r,
            lag: (r / 2.0).round().max(1.0),
            grid_step: args.grid_step,
            n_sites: 9,
            days: 30,
        })
        .collect();
    let timings = match bench_quadrature(&cases) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let m = machine();
    println!("{} {} x{} {}", m.os, m.arch, m.cpus, m.cpu_model.as_deref().unwrap_or(""));
    println!("| r | q | h | obs | build ms | predictor ms | M_ni | pi r^2 q density |");
    println!("|---:|---:|---:|---:|---:|---:|---:|---:|");
    for t in &timings {
        println!(
            "| {} | {} | {} | {} | {:.1} | {:.2} | {:.1} | {:.1} |",
            t.radius, t.lag, t.grid_step, t.n_obs, t.build_ms, t.predictor_ms, t.mean_neighbors, t.expected_neighbors
        );
    }
    if let Some(p) = &args.baseline {
        match std::fs::read(p).map(|b| serde_json::from_slice::<Vec<QuadratureTiming>>(&b)) {
            Ok(Ok(base)) => {
                for w in regressions(&timings, &base) {
                    eprintln!("warning: slower than baseline: {w}");
                }
            }
            Ok(Err(e)) => eprintln!("warning: unreadable baseline {}: {e}", p.display()),
            Err(e) => eprintln!("warning: unreadable baseline {}: {e}", p.display()),
        }
    }
    if let Some(p) = &args.save {
        if let Err(e) = stwp_core::io::write_json(p, &timings) {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    }
    ExitCode::SUCCESS
}
