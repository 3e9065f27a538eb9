//! Quadrature timings and the simulation-study reproduction tables.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use stwp_core::io;
use stwp_core::simulate::{run_study, summarize_study, ScenarioSummary, StudyConfig, StudyRow};
use stwp_core::{build_index, weighted_predictor, BufferConfig, KernelSpec, Point, PredictorMode, Result, SiteSeries, StSeries};

/// Where and with what a measurement was taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Machine {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
    pub cpu_model: Option<String>,
    pub version: String,
}

pub fn machine() -> Machine {
    let cpu_model = std::fs::read_to_string("/proc/cpuinfo").ok().and_then(|s| {
        s.lines()
            .find(|l| l.starts_with("model name"))
            .and_then(|l| l.split(':').nth(1))
            .map(|m| m.trim().to_string())
    });
    Machine {
        os: std::env::consts::OS.into(),
        arch: std::env::consts::ARCH.into(),
        cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
        cpu_model,
        version: stwp_core::VERSION.into(),
    }
}

/// A named runnable case with a wall-time budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCase {
    pub name: String,
    pub config: Option<String>,
    pub budget_secs: f64,
    pub checks: Vec<String>,
}

pub fn cases() -> Vec<BenchCase> {
    let case = |name: &str, config: Option<&str>, budget: f64, checks: &[&str]| BenchCase {
        name: name.into(),
        config: config.map(Into::into),
        budget_secs: budget,
        checks: checks.iter().map(|c| c.to_string()).collect(),
    };
    vec![
        case(
            "quadrature",
            None,
            60.0,
            &["neighbor counts match the uniform-density prediction within 10%", "every repeated mask is a cache hit"],
        ),
        case(
            "quickstart",
            Some("configs/quickstart.toml"),
            300.0,
            &["every declared file is written", "reruns are byte-identical"],
        ),
        case(
            "repro-desk",
            None,
            1800.0,
            &["truncated window inflates beta1 and xi1", "misspecification inflates sigma2", "true-window coverage in [0.90, 1]"],
        ),
    ]
}

/// A fully observed covariate on a regular grid: nodes spaced `step` km
/// over `[-half, half]²`, `per_day` evenly spaced values per day up to day
/// `days`.
pub fn uniform_grid(half: f64, step: f64, days: usize, per_day: usize) -> StSeries {
    let n = (2.0 * half / step).round() as i64;
    let mut sites = Vec::with_capacity(((n + 1) * (n + 1)) as usize);
    for i in 0..=n {
        for j in 0..=n {
            let p = Point::new(-half + i as f64 * step, -half + j as f64 * step);
            let mut s = SiteSeries::new(format!("g{i}_{j}"), p);
            for k in 1..=days * per_day {
                let t = k as f64 / per_day as f64;
                s.push(t, Some(1.0 + 0.5 * (0.1 * p.x + 0.07 * p.y + 0.3 * t).sin()));
            }
            sites.push(s);
        }
    }
    StSeries::new(sites)
}

/// Response sites on a small lattice around the origin, observed daily from
/// day `first` to `days`.
pub fn lattice_sites(n: usize, spacing: f64, first: usize, days: usize) -> StSeries {
    let side = (n as f64).sqrt().ceil() as usize;
    let offset = spacing * (side as f64 - 1.0) / 2.0;
    StSeries::new(
        (0..n)
            .map(|k| {
                let p = Point::new((k % side) as f64 * spacing - offset + 0.31, (k / side) as f64 * spacing - offset + 0.17);
                let mut s = SiteSeries::new(format!("s{k}"), p);
                for d in first..=days {
                    s.push(d as f64, Some(0.0));
                }
                s
            })
            .collect(),
    )
}

/// Covariate points expected in one buffer at uniform density:
/// `π r² q / (h² τ)`.
pub fn expected_neighbors(radius: f64, lag: f64, step: f64, time_step: f64) -> f64 {
    PI * radius * radius * lag / (step * step * time_step)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureCase {
    pub radius: f64,
    pub lag: f64,
    pub grid_step: f64,
    pub n_sites: usize,
    pub days: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureTiming {
    pub radius: f64,
    pub lag: f64,
    pub grid_step: f64,
    pub n_obs: usize,
    pub build_ms: f64,
    pub predictor_ms: f64,
    pub mean_neighbors: f64,
    pub expected_neighbors: f64,
    pub tessellations: usize,
    pub cache_hits: usize,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Times `build_index` and one `weighted_predictor` pass per case.
pub fn bench_quadrature(cases: &[QuadratureCase]) -> Result<Vec<QuadratureTiming>> {
    cases
        .iter()
        .map(|c| {
            let half = 2.0 * c.radius + 5.0;
            let x = uniform_grid(half, c.grid_step, c.days, 1);
            let first = c.lag.ceil() as usize + 1;
            let y = lattice_sites(c.n_sites, 2.0, first, c.days);
            let t0 = Instant::now();
            let index = build_index(&y, &x, BufferConfig::new(c.radius, c.lag))?;
            let build = t0.elapsed();
            let spec = KernelSpec::normalize(c.radius, c.lag, 2.0, 0.5)?;
            let t1 = Instant::now();
            let w = weighted_predictor(&index, &spec, PredictorMode::Raw)?;
            let predictor = t1.elapsed();
            std::hint::black_box(w);
            let counts: Vec<usize> = index.observations.iter().map(|o| o.n_neighbors).collect();
            Ok(QuadratureTiming {
                radius: c.radius,
                lag: c.lag,
                grid_step: c.grid_step,
                n_obs: counts.len(),
                build_ms: ms(build),
                predictor_ms: ms(predictor),
                mean_neighbors: counts.iter().sum::<usize>() as f64 / counts.len() as f64,
                expected_neighbors: expected_neighbors(c.radius, c.lag, c.grid_step, 1.0),
                tessellations: index.stats.tessellations,
                cache_hits: index.stats.cache_hits,
            })
        })
        .collect()
}

/// Timings more than 25% slower than the baseline for the same case.
pub fn regressions(current: &[QuadratureTiming], baseline: &[QuadratureTiming]) -> Vec<String> {
    let mut out = Vec::new();
    for c in current {
        let Some(b) = baseline
            .iter()
            .find(|b| b.radius == c.radius && b.lag == c.lag && b.grid_step == c.grid_step && b.n_obs == c.n_obs)
        else {
            continue;
        };
        for (what, now, then) in [("build", c.build_ms, b.build_ms), ("predictor", c.predictor_ms, b.predictor_ms)] {
            if now > 1.25 * then {
                out.push(format!(
                    "r={} q={} h={}: {what} {now:.1} ms vs baseline {then:.1} ms",
                    c.radius, c.lag, c.grid_step
                ));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproReport {
    pub machine: Machine,
    pub config: StudyConfig,
    pub elapsed_secs: f64,
    pub rows: Vec<StudyRow>,
    pub summaries: Vec<ScenarioSummary>,
}

pub fn study_config(scale: Scale) -> StudyConfig {
    match scale {
        Scale::Desk => StudyConfig::desk(),
        Scale::Full => StudyConfig::full(),
    }
}

pub fn repro_simulation(cfg: &StudyConfig) -> Result<ReproReport> {
    let t0 = Instant::now();
    let rows = run_study(cfg)?;
    let summaries = summarize_study(&rows);
    Ok(ReproReport {
        machine: machine(),
        config: cfg.clone(),
        elapsed_secs: t0.elapsed().as_secs_f64(),
        rows,
        summaries,
    })
}

/// One row per replicate, scenario and parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub replicate: usize,
    pub scenario: String,
    pub parameter: String,
    pub median: f64,
    pub lo95: f64,
    pub hi95: f64,
    pub rhat: f64,
    pub ess: f64,
}

/// One row per replicate and scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub replicate: usize,
    pub scenario: String,
    pub missing_rate: f64,
    pub rmse: f64,
    pub r2: Option<f64>,
    pub coverage: f64,
    pub mean_width: f64,
    pub converged: bool,
}

pub fn param_rows(rows: &[StudyRow]) -> Vec<ParamRow> {
    rows.iter()
        .flat_map(|r| {
            r.params.iter().map(move |p| ParamRow {
                replicate: r.replicate,
                scenario: r.scenario.clone(),
                parameter: p.name.clone(),
                median: p.median,
                lo95: p.lo95,
                hi95: p.hi95,
                rhat: p.rhat,
                ess: p.ess,
            })
        })
        .collect()
}

pub fn score_rows(rows: &[StudyRow]) -> Vec<ScoreRow> {
    rows.iter()
        .map(|r| ScoreRow {
            replicate: r.replicate,
            scenario: r.scenario.clone(),
            missing_rate: r.missing_rate,
            rmse: r.rmse,
            r2: r.r2,
            coverage: r.coverage,
            mean_width: r.mean_width,
            converged: r.converged,
        })
        .collect()
}

pub fn markdown(report: &ReproReport) -> String {
    let mut s = String::new();
    let m = &report.machine;
    let c = &report.config;
    let _ = writeln!(s, "# Simulation study reproduction\n");
    let _ = writeln!(
        s,
        "{} replicates, {} sites ({} fitted), {} days, seed {}. {} chains of {} iterations ({} warm-up).\n",
        c.replicates, c.sim.n_sites, c.sim.n_fit, c.sim.n_times, c.seed, c.mcmc.n_chains, c.mcmc.n_iter, c.mcmc.n_warmup
    );
    let _ = writeln!(
        s,
        "Machine: {} {} with {} CPUs ({}), version {}. Elapsed {:.0} s.\n",
        m.os,
        m.arch,
        m.cpus,
        m.cpu_model.as_deref().unwrap_or("unknown CPU"),
        m.version,
        report.elapsed_secs
    );
    let _ = writeln!(s, "## Parameter estimates (medians over replicates)\n");
    let _ = writeln!(s, "| scenario | fits | beta1 | xi1 | sigma2 | converged |");
    let _ = writeln!(s, "|---|---:|---:|---:|---:|---:|");
    for t in &report.summaries {
        let _ = writeln!(
            s,
            "| {} | {} | {:.3} | {:.3} | {:.4} | {}/{} |",
            t.scenario, t.n_fits, t.median_beta1, t.median_xi1, t.median_sigma2, t.converged, t.n_fits
        );
    }
    let _ = writeln!(s, "\n## Out-of-sample prediction\n");
    let _ = writeln!(s, "| scenario | median RMSE | median coverage | mean coverage | mean 95% width |");
    let _ = writeln!(s, "|---|---:|---:|---:|---:|");
    for t in &report.summaries {
        let _ = writeln!(
            s,
            "| {} | {:.4} | {:.3} | {:.3} | {:.4} |",
            t.scenario, t.median_rmse, t.median_coverage, t.mean_coverage, t.mean_width
        );
    }
    s
}

/// Writes `report.md`, `report.json`, `params.csv`, `scores.csv` and
/// `summary.csv` into `dir`.
pub fn write_report(dir: &Path, report: &ReproReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| stwp_core::Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let md = dir.join("report.md");
    std::fs::write(&md, markdown(report)).map_err(|source| stwp_core::Error::Io { path: md, source })?;
    io::write_json(&dir.join("report.json"), report)?;
    io::write_long(&dir.join("params.csv"), &param_rows(&report.rows))?;
    io::write_long(&dir.join("scores.csv"), &score_rows(&report.rows))?;
    io::write_long(&dir.join("summary.csv"), &report.summaries)
}
