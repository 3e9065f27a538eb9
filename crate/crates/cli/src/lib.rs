//! `stwp` subcommands. Each command reads its section of an optional TOML
//! file, applies flag overrides, runs, and writes its outputs together with a
//! JSON record of the exact configuration used.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde::Serialize;

use stwp_core::bounds::bound_report;
use stwp_core::data::align_indicator;
use stwp_core::inference::{
    convergence, fit_collocated, predict, predict_collocated, run_chain, summarize, Convergence, ParamSummary, Variant,
};
use stwp_core::io::{
    self, BoundConfig, BuffersConfig, EvaluateConfig, FitConfig, FitSummary, PredictConfig, RunConfig, SimulateConfig,
};
use stwp_core::metrics::{score_matched, ScoreReport};
use stwp_core::simulate::{inject_missingness, Simulator};
use stwp_core::{build_index, rng, Error, KernelSpec, Point, Result, StSeries, VERSION};

/// Environment variable holding the default worker count.
pub const THREADS_ENV: &str = "STWP_THREADS";

#[derive(Debug, Parser)]
#[command(name = "stwp", version, about = "Kernel-weighted spatio-temporal regression")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (defaults to the config file, then STWP_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a covariate field and responses.
    Simulate(SimulateArgs),
    /// Fit a model and store posterior draws.
    Fit(FitArgs),
    /// Posterior predictive intervals at target sites and times.
    Predict(PredictArgs),
    /// Check misspecification bounds on a simulated field.
    Bound(BoundArgs),
    /// Score predictions against observations.
    Evaluate(EvaluateArgs),
    /// Export buffer diagnostics.
    Buffers(BuffersArgs),
}

#[derive(Debug, Default, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use the reduced desk design instead of the full one.
    #[arg(long)]
    pub desk: bool,
}

#[derive(Debug, Default, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub response: Option<PathBuf>,
    #[arg(long)]
    pub covariate: Option<PathBuf>,
    #[arg(long)]
    pub indicator: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub lag: Option<f64>,
    #[arg(long)]
    pub n_iter: Option<usize>,
    #[arg(long)]
    pub n_warmup: Option<usize>,
    #[arg(long)]
    pub chains: Option<usize>,
}

#[derive(Debug, Default, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub fit_dir: Option<PathBuf>,
    #[arg(long)]
    pub targets: Option<PathBuf>,
    #[arg(long)]
    pub covariate: Option<PathBuf>,
    #[arg(long)]
    pub indicator: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub draws: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Args)]
pub struct BoundArgs {
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub observed: Option<PathBuf>,
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Args)]
pub struct BuffersArgs {
    #[arg(long)]
    pub response: Option<PathBuf>,
    #[arg(long)]
    pub covariate: Option<PathBuf>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub lag: Option<f64>,
    #[arg(long)]
    pub min_neighbors: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn required(path: &Path, what: &str) -> Result<()> {
    if path.as_os_str().is_empty() {
        Err(Error::config(format!("{what} is required")))
    } else {
        Ok(())
    }
}

fn out_dir(dir: &Path) -> Result<PathBuf> {
    let dir = if dir.as_os_str().is_empty() { Path::new(".") } else { dir };
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    Ok(dir.to_path_buf())
}

fn parent_dir(file: &Path) -> Result<()> {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => out_dir(p).map(|_| ()),
        _ => Ok(()),
    }
}

/// The JSON record written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunRecord<'a, C: Serialize, R: Serialize> {
    pub version: &'a str,
    pub command: &'a str,
    pub config: &'a C,
    pub seeds: BTreeMap<&'a str, u64>,
    pub result: R,
}

fn record<C: Serialize, R: Serialize>(path: &Path, command: &str, config: &C, seeds: BTreeMap<&str, u64>, result: R) -> Result<()> {
    io::write_json(
        path,
        &RunRecord {
            version: VERSION,
            command,
            config,
            seeds,
            result,
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateOutcome {
    pub n_covariate_entries: usize,
    pub n_masked: usize,
    pub declared_rate: f64,
    pub realized_rate: f64,
    pub kernel: KernelSpec,
    pub n_fit_sites: usize,
    pub n_held_out_sites: usize,
}

/// Writes `covariate.csv` (masked entries absent), `mask.csv` (the masked
/// entries), `response.csv` (fitting sites), `holdout.csv` (held-out sites),
/// `truth_mean.csv` (noiseless mean at every site) and `simulate.json`.
pub fn cmd_simulate(cfg: &SimulateConfig) -> Result<SimulateOutcome> {
    let dir = out_dir(&cfg.out_dir)?;
    let sim = Simulator::new(cfg.sim.clone())?;
    let data = sim.replicate(cfg.sim.seed)?;
    let x_full = data.field.to_series();
    let mask_seed = rng::derive(cfg.sim.seed, &[1]);
    let x = match &cfg.missing {
        Some(m) => inject_missingness(&x_full, m, mask_seed)?,
        None => x_full.clone(),
    };
    io::write_series(&dir.join("covariate.csv"), &x, false)?;

    #[derive(Serialize)]
    struct Masked<'a> {
        site_id: &'a str,
        t_day: f64,
    }
    let masked: Vec<Masked<'_>> = x_full
        .sites
        .iter()
        .zip(&x.sites)
        .flat_map(|(full, kept)| {
            full.times
                .iter()
                .zip(full.values.iter().zip(&kept.values))
                .filter(|(_, (a, b))| a.is_some() && b.is_none())
                .map(move |(&t, _)| Masked {
                    site_id: &full.site_id,
                    t_day: t,
                })
        })
        .collect();
    io::write_long(&dir.join("mask.csv"), &masked)?;
    io::write_series(&dir.join("response.csv"), &data.fit_response(), true)?;
    io::write_series(&dir.join("holdout.csv"), &data.held_out_response(), true)?;

    let resp = &data.response;
    let mut mean = resp.series.clone();
    for (s, m) in mean.sites.iter_mut().zip(&resp.mean) {
        s.values = m.iter().map(|&v| Some(v)).collect();
    }
    io::write_series(&dir.join("truth_mean.csv"), &mean, true)?;

    let n_entries = x_full.n_present();
    let outcome = SimulateOutcome {
        n_covariate_entries: n_entries,
        n_masked: masked.len(),
        declared_rate: cfg.missing.map_or(0.0, |m| m.rate),
        realized_rate: masked.len() as f64 / n_entries as f64,
        kernel: cfg.sim.kernel()?,
        n_fit_sites: data.n_fit,
        n_held_out_sites: resp.sites.len() - data.n_fit,
    };
    let seeds = BTreeMap::from([("replicate", cfg.sim.seed), ("mask", mask_seed)]);
    record(&dir.join("simulate.json"), "simulate", cfg, seeds, &outcome)?;
    Ok(outcome)
}

fn plume_flags(y: &StSeries, indicator: Option<&Path>) -> Result<Option<Vec<Vec<bool>>>> {
    indicator
        .map(|p| Ok(align_indicator(y, &io::read_indicator(p)?, false)?))
        .transpose()
}

/// Writes `samples.csv` and `summary.json` to the output directory.
pub fn cmd_fit(cfg: &FitConfig) -> Result<FitSummary> {
    required(&cfg.response, "fit.response")?;
    required(&cfg.covariate, "fit.covariate")?;
    cfg.model.validate()?;
    cfg.mcmc.validate()?;
    let dir = out_dir(&cfg.out_dir)?;
    let y = io::read_series(&cfg.response)?;
    let x = io::read_series(&cfg.covariate)?;
    let samples = if cfg.model.variant == Variant::Collocated {
        fit_collocated(&y, &x, &cfg.model, &cfg.mcmc)?.samples
    } else {
        let plume = plume_flags(&y, cfg.indicator.as_deref())?;
        let index = build_index(&y, &x, cfg.model.buffer_config())?;
        run_chain(&cfg.model, &index, plume.as_deref(), &cfg.mcmc)?
    };
    let params: Vec<ParamSummary> = summarize(&samples);
    let conv: Convergence = convergence(&samples, &params);
    let mut summary = FitSummary::new(&samples, &cfg.mcmc, params, conv);
    summary.inputs.insert("response".into(), cfg.response.display().to_string());
    summary.inputs.insert("covariate".into(), cfg.covariate.display().to_string());
    if let Some(p) = &cfg.indicator {
        summary.inputs.insert("indicator".into(), p.display().to_string());
    }
    io::write_samples(&dir.join("samples.csv"), &samples)?;
    io::write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Writes the prediction table and `<out>.json`.
pub fn cmd_predict(cfg: &PredictConfig) -> Result<Vec<stwp_core::inference::Prediction>> {
    required(&cfg.fit_dir, "predict.fit_dir")?;
    required(&cfg.targets, "predict.targets")?;
    required(&cfg.covariate, "predict.covariate")?;
    required(&cfg.out, "predict.out")?;
    let summary: FitSummary = io::read_json(&cfg.fit_dir.join("summary.json"))?;
    let samples = io::read_samples(&cfg.fit_dir.join("samples.csv"), &summary)?;
    let y = io::read_series(&cfg.targets)?;
    let x = io::read_series(&cfg.covariate)?;
    let draws = cfg.draws.unwrap_or(summary.mcmc.predict_draws);
    let seed = cfg.seed.unwrap_or(summary.mcmc.seed);
    let preds = if samples.spec.variant == Variant::Collocated {
        predict_collocated(&samples, &y, &x, draws, seed)?
    } else {
        let plume = plume_flags(&y, cfg.indicator.as_deref())?;
        let index = build_index(&y, &x, samples.spec.buffer_config())?;
        predict(&samples, &index, plume.as_deref(), draws, seed)?
    };
    parent_dir(&cfg.out)?;
    io::write_predictions(&cfg.out, &preds)?;
    let flagged = preds.iter().filter(|p| p.interval.is_none()).count();
    #[derive(Serialize)]
    struct Outcome {
        n_targets: usize,
        n_flagged: usize,
        draws: usize,
    }
    record(
        &cfg.out.with_extension("json"),
        "predict",
        cfg,
        BTreeMap::from([("predict", seed), ("fit", summary.mcmc.seed)]),
        Outcome {
            n_targets: preds.len(),
            n_flagged: flagged,
            draws,
        },
    )?;
    Ok(preds)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundOutcome {
    pub window: [f64; 2],
    pub n_points: usize,
    pub n_dominated: usize,
    pub n_asserted: usize,
    pub max_actual: f64,
    pub max_prop_bound: f64,
}

/// Evaluates the bounds at random points of a simulated field, for every
/// alternative window. Writes `bound.csv` and `bound.json`.
pub fn cmd_bound(cfg: &BoundConfig) -> Result<Vec<BoundOutcome>> {
    let dir = out_dir(&cfg.out_dir)?;
    let sim = Simulator::new(cfg.sim.clone())?;
    let field = sim.covariate(&mut rng::stream(cfg.field_seed, 0));
    let truth = cfg.sim.kernel()?;
    let d = cfg.sim.domain;
    let m = cfg.sim.site_margin;
    let times = cfg.sim.response_times();
    let mut prng = rng::stream(cfg.point_seed, 3);
    let points: Vec<(Point, f64)> = (0..cfg.n_points)
        .map(|_| {
            let s = Point::new(
                prng.random_range(d.x_min + m..=d.x_max - m),
                prng.random_range(d.y_min + m..=d.y_max - m),
            );
            (s, times[prng.random_range(0..times.len())])
        })
        .collect();
    let mut rows = Vec::new();
    let mut outcomes = Vec::new();
    for &[r_alt, q_alt] in &cfg.windows {
        let alt = KernelSpec {
            radius: r_alt,
            lag: q_alt,
            ..truth
        };
        let reports = bound_report(&field, &truth, &alt, cfg.beta0, cfg.beta1, &points, &cfg.grid, cfg.envelopes)?;
        outcomes.push(BoundOutcome {
            window: [r_alt, q_alt],
            n_points: reports.len(),
            n_dominated: reports.iter().filter(|b| b.dominates).count(),
            n_asserted: reports.iter().filter(|b| b.dominance_asserted).count(),
            max_actual: reports.iter().map(|b| b.actual).fold(0.0, f64::max),
            max_prop_bound: reports.iter().map(|b| b.prop_bound).fold(0.0, f64::max),
        });
        rows.extend(reports.into_iter().map(|b| (r_alt, q_alt, b)));
    }
    io::write_bound_reports(&dir.join("bound.csv"), &rows)?;
    record(
        &dir.join("bound.json"),
        "bound",
        cfg,
        BTreeMap::from([("field", cfg.field_seed), ("points", cfg.point_seed)]),
        &outcomes,
    )?;
    Ok(outcomes)
}

/// Writes `evaluate.json` and the long table `evaluate_long.csv` with one
/// row per scored observation.
pub fn cmd_evaluate(cfg: &EvaluateConfig) -> Result<ScoreReport> {
    required(&cfg.observed, "evaluate.observed")?;
    required(&cfg.predictions, "evaluate.predictions")?;
    let dir = out_dir(&cfg.out_dir)?;
    let observed = io::observed(&io::read_series(&cfg.observed)?);
    let preds = io::read_predictions(&cfg.predictions)?;
    let report = score_matched(&observed, &preds)?;

    #[derive(Serialize)]
    struct Long<'a> {
        site_id: &'a str,
        t_day: f64,
        observed: f64,
        median: Option<f64>,
        lo95: Option<f64>,
        hi95: Option<f64>,
        covered: Option<u8>,
    }
    let table: BTreeMap<(&str, u64), &stwp_core::inference::Prediction> = preds
        .iter()
        .map(|p| ((p.site_id.as_str(), p.time.to_bits()), p))
        .collect();
    let long: Vec<Long<'_>> = observed
        .iter()
        .map(|o| {
            let iv = table[&(o.site_id.as_str(), o.time.to_bits())].interval;
            Long {
                site_id: &o.site_id,
                t_day: o.time,
                observed: o.value,
                median: iv.map(|i| i.median),
                lo95: iv.map(|i| i.lo95),
                hi95: iv.map(|i| i.hi95),
                covered: iv.map(|i| u8::from(i.contains(o.value))),
            }
        })
        .collect();
    io::write_long(&dir.join("evaluate_long.csv"), &long)?;
    record(&dir.join("evaluate.json"), "evaluate", cfg, BTreeMap::new(), &report)?;
    Ok(report)
}

/// Writes neighbor counts, temporal increment sums and validity for every
/// response entry.
pub fn cmd_buffers(cfg: &BuffersConfig) -> Result<usize> {
    required(&cfg.response, "buffers.response")?;
    required(&cfg.covariate, "buffers.covariate")?;
    required(&cfg.out, "buffers.out")?;
    let y = io::read_series(&cfg.response)?;
    let x = io::read_series(&cfg.covariate)?;
    let mut bc = stwp_core::BufferConfig::new(cfg.radius, cfg.lag);
    bc.min_neighbors = cfg.min_neighbors;
    let index = build_index(&y, &x, bc)?;
    let diags = index.diagnostics();
    parent_dir(&cfg.out)?;
    io::write_buffers(&cfg.out, &diags)?;
    record(&cfg.out.with_extension("json"), "buffers", cfg, BTreeMap::new(), index.n_valid())?;
    Ok(diags.len())
}

/// Worker count: flag, then config file, then the environment.
pub fn thread_count(flag: Option<usize>, file: Option<usize>) -> Result<Option<usize>> {
    if let Some(n) = flag.or(file) {
        return Ok(Some(n));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::config(format!("{THREADS_ENV}={v} is not a thread count"))),
        Err(_) => Ok(None),
    }
}

/// Parses the config file, merges flags and runs the command inside a
/// bounded worker pool.
pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => io::read_config(p)?,
        None => RunConfig::default(),
    };
    let threads = thread_count(cli.threads, file.threads)?;
    if threads == Some(0) {
        return Err(Error::config("thread count must be positive"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cli.command, file))
}

fn dispatch(command: Command, file: RunConfig) -> Result<()> {
    match command {
        Command::Simulate(a) => {
            let mut c = file.simulate.unwrap_or_default();
            if a.desk {
                c.sim = stwp_core::simulate::SimConfig {
                    seed: c.sim.seed,
                    ..stwp_core::simulate::SimConfig::desk()
                };
            }
            set(&mut c.out_dir, a.out_dir);
            set(&mut c.sim.seed, a.seed);
            let o = cmd_simulate(&c)?;
            eprintln!(
                "simulated {} covariate entries ({} masked), {} fitting and {} held-out sites",
                o.n_covariate_entries, o.n_masked, o.n_fit_sites, o.n_held_out_sites
            );
        }
        Command::Fit(a) => {
            let mut c = file.fit.unwrap_or_default();
            set(&mut c.response, a.response);
            set(&mut c.covariate, a.covariate);
            if a.indicator.is_some() {
                c.indicator = a.indicator;
            }
            set(&mut c.out_dir, a.out_dir);
            set(&mut c.mcmc.seed, a.seed);
            set(&mut c.model.radius, a.radius);
            set(&mut c.model.lag, a.lag);
            set(&mut c.mcmc.n_iter, a.n_iter);
            set(&mut c.mcmc.n_warmup, a.n_warmup);
            set(&mut c.mcmc.n_chains, a.chains);
            let s = cmd_fit(&c)?;
            for p in &s.params {
                eprintln!(
                    "{:<10} median {:>10.4}  95% [{:.4}, {:.4}]  rhat {:.3}  ess {:.0}",
                    p.name, p.median, p.lo95, p.hi95, p.rhat, p.ess
                );
            }
            if !s.convergence.converged {
                eprintln!(
                    "warning: not converged (max rhat {:.3}, min ess {:.0})",
                    s.convergence.max_rhat, s.convergence.min_ess
                );
            }
        }
        Command::Predict(a) => {
            let mut c = file.predict.unwrap_or_default();
            set(&mut c.fit_dir, a.fit_dir);
            set(&mut c.targets, a.targets);
            set(&mut c.covariate, a.covariate);
            set(&mut c.out, a.out);
            if a.indicator.is_some() {
                c.indicator = a.indicator;
            }
            if a.draws.is_some() {
                c.draws = a.draws;
            }
            if a.seed.is_some() {
                c.seed = a.seed;
            }
            let p = cmd_predict(&c)?;
            let flagged = p.iter().filter(|p| p.interval.is_none()).count();
            eprintln!("{} predictions, {} flagged", p.len(), flagged);
        }
        Command::Bound(a) => {
            let mut c = file.bound.unwrap_or_default();
            set(&mut c.out_dir, a.out_dir);
            set(&mut c.n_points, a.points);
            set(&mut c.point_seed, a.seed);
            for o in cmd_bound(&c)? {
                eprintln!(
                    "window ({}, {}): bound dominates at {}/{} points",
                    o.window[0], o.window[1], o.n_dominated, o.n_points
                );
            }
        }
        Command::Evaluate(a) => {
            let mut c = file.evaluate.unwrap_or_default();
            set(&mut c.observed, a.observed);
            set(&mut c.predictions, a.predictions);
            set(&mut c.out_dir, a.out_dir);
            let r = cmd_evaluate(&c)?;
            eprintln!(
                "rmse {:.4}  r2 {}  coverage {:.3}  mean width {:.4}  ({} scored, {} flagged)",
                r.rmse,
                r.r2.map_or("n/a".to_string(), |v| format!("{v:.4}")),
                r.coverage,
                r.mean_width,
                r.n_scored,
                r.n_skipped
            );
        }
        Command::Buffers(a) => {
            let mut c = file.buffers.unwrap_or_default();
            set(&mut c.response, a.response);
            set(&mut c.covariate, a.covariate);
            set(&mut c.radius, a.radius);
            set(&mut c.lag, a.lag);
            set(&mut c.min_neighbors, a.min_neighbors);
            set(&mut c.out, a.out);
            let n = cmd_buffers(&c)?;
            eprintln!("{n} buffers written");
        }
    }
    Ok(())
}
