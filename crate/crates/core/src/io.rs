//! File formats: long CSV tables, JSON summaries, TOML run configuration.
//!
//! | table        | columns                                                   |
//! |--------------|-----------------------------------------------------------|
//! | series       | `site_id,x_km,y_km,t_day,value`                           |
//! | indicator    | `site_id,t_day,flag`                                      |
//! | predictions  | `site_id,x_km,y_km,t_day,median,lo95,hi95,flagged`        |
//! | samples      | `parameter,chain,iteration,value`                         |
//! | buffers      | `site_id,t_day,n_neighbors,sum_delta,valid`               |
//!
//! A missing covariate value is an absent row. In a response file an empty
//! `value` marks a prediction target without an observation.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bounds::{BoundReport, Envelopes, ReferenceGrid};
use crate::data::{validate, IndicatorRow, IndicatorSeries, Point, SiteSeries, StSeries};
use crate::error::{Error, Result};
use crate::inference::{ChainDraws, Convergence, Interval, Layout, McmcConfig, ModelSpec, ParamSummary, PosteriorSamples, Prediction};
use crate::metrics::Observed;
use crate::predictor::BufferDiagnostic;
use crate::simulate::{Missingness, SimConfig};

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let f = File::create(path).map_err(io_err(path))?;
    Ok(csv::Writer::from_writer(BufWriter::new(f)))
}

fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    rdr.deserialize().map(|r| r.map_err(csv_err(path))).collect()
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = writer(path)?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRecord {
    pub site_id: String,
    pub x_km: f64,
    pub y_km: f64,
    pub t_day: f64,
    pub value: Option<f64>,
}

pub fn read_series(path: &Path) -> Result<StSeries> {
    let rows: Vec<SeriesRecord> = read_rows(path)?;
    let mut order: Vec<String> = Vec::new();
    let mut sites: HashMap<String, (Point, Vec<(f64, Option<f64>)>)> = HashMap::new();
    for (line, r) in rows.into_iter().enumerate() {
        let p = Point::new(r.x_km, r.y_km);
        match sites.get_mut(&r.site_id) {
            Some((c, entries)) => {
                if *c != p {
                    return Err(Error::data(format!(
                        "{}: line {}: site {} moves from ({}, {}) to ({}, {})",
                        path.display(),
                        line + 2,
                        r.site_id,
                        c.x,
                        c.y,
                        p.x,
                        p.y
                    )));
                }
                entries.push((r.t_day, r.value));
            }
            None => {
                order.push(r.site_id.clone());
                sites.insert(r.site_id, (p, vec![(r.t_day, r.value)]));
            }
        }
    }
    let series = StSeries::new(
        order
            .into_iter()
            .map(|id| {
                let (p, mut entries) = sites.remove(&id).expect("site recorded");
                entries.sort_by(|a, b| a.0.total_cmp(&b.0));
                let mut s = SiteSeries::new(id, p);
                for (t, v) in entries {
                    s.push(t, v);
                }
                s
            })
            .collect(),
    );
    let problems = validate(&series);
    if let Some(v) = problems.first() {
        return Err(Error::data(format!("{}: {v}", path.display())));
    }
    Ok(series)
}

/// Writes present entries; with `keep_missing`, missing entries become rows
/// with an empty value.
pub fn write_series(path: &Path, series: &StSeries, keep_missing: bool) -> Result<()> {
    let rows = series.sites.iter().flat_map(|s| {
        s.times.iter().zip(&s.values).filter_map(move |(&t, &v)| {
            (v.is_some() || keep_missing).then(|| SeriesRecord {
                site_id: s.site_id.clone(),
                x_km: s.coord.x,
                y_km: s.coord.y,
                t_day: t,
                value: v,
            })
        })
    });
    write_rows(path, rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndicatorRecord {
    site_id: String,
    t_day: f64,
    flag: u8,
}

pub fn read_indicator(path: &Path) -> Result<IndicatorSeries> {
    let rows: Vec<IndicatorRecord> = read_rows(path)?;
    rows.into_iter()
        .enumerate()
        .map(|(line, r)| match r.flag {
            0 | 1 => Ok(IndicatorRow {
                site_id: r.site_id,
                time: r.t_day,
                flag: r.flag == 1,
            }),
            f => Err(Error::data(format!("{}: line {}: flag must be 0 or 1, got {f}", path.display(), line + 2))),
        })
        .collect::<Result<Vec<_>>>()
        .map(|rows| IndicatorSeries { rows })
}

pub fn write_indicator(path: &Path, ind: &IndicatorSeries) -> Result<()> {
    write_rows(
        path,
        ind.rows.iter().map(|r| IndicatorRecord {
            site_id: r.site_id.clone(),
            t_day: r.time,
            flag: u8::from(r.flag),
        }),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PredictionRecord {
    site_id: String,
    x_km: f64,
    y_km: f64,
    t_day: f64,
    median: Option<f64>,
    lo95: Option<f64>,
    hi95: Option<f64>,
    flagged: u8,
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    write_rows(
        path,
        preds.iter().map(|p| PredictionRecord {
            site_id: p.site_id.clone(),
            x_km: p.coord.x,
            y_km: p.coord.y,
            t_day: p.time,
            median: p.interval.map(|i| i.median),
            lo95: p.interval.map(|i| i.lo95),
            hi95: p.interval.map(|i| i.hi95),
            flagged: u8::from(p.interval.is_none()),
        }),
    )
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let rows: Vec<PredictionRecord> = read_rows(path)?;
    rows.into_iter()
        .enumerate()
        .map(|(line, r)| {
            let interval = match (r.flagged, r.median, r.lo95, r.hi95) {
                (1, ..) => None,
                (0, Some(median), Some(lo95), Some(hi95)) => Some(Interval { median, lo95, hi95 }),
                _ => {
                    return Err(Error::data(format!(
                        "{}: line {}: an unflagged row needs median, lo95 and hi95",
                        path.display(),
                        line + 2
                    )))
                }
            };
            Ok(Prediction {
                site_id: r.site_id,
                coord: Point::new(r.x_km, r.y_km),
                time: r.t_day,
                interval,
            })
        })
        .collect()
}

/// Present responses as scoring truths.
pub fn observed(series: &StSeries) -> Vec<Observed> {
    series
        .sites
        .iter()
        .flat_map(|s| {
            s.times.iter().zip(&s.values).filter_map(move |(&t, &v)| {
                v.map(|value| Observed {
                    site_id: s.site_id.clone(),
                    time: t,
                    value,
                })
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SampleRecord {
    parameter: String,
    chain: usize,
    iteration: usize,
    value: f64,
}

/// Post-warmup draws; `iteration` counts from 1 over the whole run.
pub fn write_samples(path: &Path, samples: &PosteriorSamples) -> Result<()> {
    let rows = samples.names.iter().enumerate().flat_map(|(k, name)| {
        samples.chains.iter().enumerate().flat_map(move |(c, ch)| {
            ch.draws[k].iter().enumerate().map(move |(i, &v)| SampleRecord {
                parameter: name.clone(),
                chain: c,
                iteration: samples.n_warmup + i + 1,
                value: v,
            })
        })
    });
    write_rows(path, rows)
}

/// Everything about a fit except the draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub version: String,
    pub model: ModelSpec,
    pub mcmc: McmcConfig,
    pub basis: Option<crate::inference::BSpline>,
    pub names: Vec<String>,
    pub n_obs: usize,
    pub params: Vec<ParamSummary>,
    pub acceptance: Vec<BTreeMap<String, f64>>,
    pub steps: Vec<BTreeMap<String, f64>>,
    pub convergence: Convergence,
    pub inputs: BTreeMap<String, String>,
}

impl FitSummary {
    pub fn new(samples: &PosteriorSamples, mcmc: &McmcConfig, params: Vec<ParamSummary>, convergence: Convergence) -> Self {
        Self {
            version: crate::VERSION.to_string(),
            model: samples.spec.clone(),
            mcmc: mcmc.clone(),
            basis: samples.layout.basis.clone(),
            names: samples.names.clone(),
            n_obs: samples.n_obs,
            params,
            acceptance: samples.chains.iter().map(|c| c.acceptance.clone()).collect(),
            steps: samples.chains.iter().map(|c| c.steps.clone()).collect(),
            convergence,
            inputs: BTreeMap::new(),
        }
    }
}

/// Rebuilds posterior samples from a samples table and its summary.
pub fn read_samples(path: &Path, summary: &FitSummary) -> Result<PosteriorSamples> {
    let rows: Vec<SampleRecord> = read_rows(path)?;
    let n_chains = summary.acceptance.len();
    let n_params = summary.names.len();
    let mut chains: Vec<ChainDraws> = (0..n_chains)
        .map(|c| ChainDraws {
            draws: vec![Vec::new(); n_params],
            acceptance: summary.acceptance[c].clone(),
            steps: summary.steps[c].clone(),
        })
        .collect();
    for (line, r) in rows.into_iter().enumerate() {
        let k = summary
            .names
            .iter()
            .position(|n| *n == r.parameter)
            .ok_or_else(|| Error::data(format!("{}: line {}: unknown parameter {}", path.display(), line + 2, r.parameter)))?;
        let ch = chains
            .get_mut(r.chain)
            .ok_or_else(|| Error::data(format!("{}: line {}: chain {} out of range", path.display(), line + 2, r.chain)))?;
        ch.draws[k].push(r.value);
    }
    let n_kept = summary.mcmc.n_kept();
    if chains.iter().any(|c| c.draws.iter().any(|d| d.len() != n_kept)) {
        return Err(Error::data(format!(
            "{}: expected {n_kept} draws per parameter and chain",
            path.display()
        )));
    }
    let layout = Layout::new(summary.model.variant, summary.basis.clone())?;
    Ok(PosteriorSamples {
        spec: summary.model.clone(),
        layout,
        names: summary.names.clone(),
        n_iter: summary.mcmc.n_iter,
        n_warmup: summary.mcmc.n_warmup,
        seed: summary.mcmc.seed,
        n_obs: summary.n_obs,
        chains,
    })
}

pub fn write_buffers(path: &Path, diags: &[BufferDiagnostic]) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        site_id: &'a str,
        t_day: f64,
        n_neighbors: usize,
        sum_delta: f64,
        valid: u8,
    }
    write_rows(
        path,
        diags.iter().map(|d| Row {
            site_id: &d.site_id,
            t_day: d.time,
            n_neighbors: d.n_neighbors,
            sum_delta: d.sum_delta,
            valid: u8::from(d.valid),
        }),
    )
}

pub fn write_bound_reports(path: &Path, reports: &[(f64, f64, BoundReport)]) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        r_alt: f64,
        q_alt: f64,
        x_km: f64,
        y_km: f64,
        t_day: f64,
        mean_true: f64,
        mean_alt: f64,
        actual: f64,
        prop_bound: f64,
        envelope_bound: Option<f64>,
        delta_space: f64,
        delta_time: f64,
        dominates: u8,
    }
    write_rows(
        path,
        reports.iter().map(|(ra, qa, b)| Row {
            r_alt: *ra,
            q_alt: *qa,
            x_km: b.location.x,
            y_km: b.location.y,
            t_day: b.time,
            mean_true: b.mean_true,
            mean_alt: b.mean_alt,
            actual: b.actual,
            prop_bound: b.prop_bound,
            envelope_bound: b.envelope_bound,
            delta_space: b.envelopes.space,
            delta_time: b.envelopes.time,
            dominates: u8::from(b.dominates),
        }),
    )
}

/// Long table of one column per field for plotting.
pub fn write_long<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_rows(path, rows.iter())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(io_err(path))?;
    serde_json::from_reader(std::io::BufReader::new(f)).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses a TOML run configuration; errors carry the line and column.
pub fn parse_config(text: &str, origin: &str) -> Result<RunConfig> {
    toml::from_str(text).map_err(|e| Error::config(format!("{origin}: {e}")))
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_config(&text, &path.display().to_string())
}

/// One section per command; a run reads the section of its command.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub threads: Option<usize>,
    pub simulate: Option<SimulateConfig>,
    pub fit: Option<FitConfig>,
    pub predict: Option<PredictConfig>,
    pub bound: Option<BoundConfig>,
    pub evaluate: Option<EvaluateConfig>,
    pub buffers: Option<BuffersConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub sim: SimConfig,
    pub missing: Option<Missingness>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub response: PathBuf,
    pub covariate: PathBuf,
    pub indicator: Option<PathBuf>,
    pub model: ModelSpec,
    pub mcmc: McmcConfig,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    /// Directory written by `fit`.
    pub fit_dir: PathBuf,
    pub targets: PathBuf,
    pub covariate: PathBuf,
    pub indicator: Option<PathBuf>,
    /// Defaults to the fit's `predict_draws`.
    pub draws: Option<usize>,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundConfig {
    /// Covariate field: a simulated replicate of this configuration.
    pub sim: SimConfig,
    pub field_seed: u64,
    /// Misspecified windows `(r̃, q̃)`.
    pub windows: Vec<[f64; 2]>,
    pub beta0: f64,
    pub beta1: f64,
    pub n_points: usize,
    pub point_seed: u64,
    pub grid: ReferenceGrid,
    /// Tail envelopes; defaults to the kernel values at the true window
    /// edge.
    pub envelopes: Option<Envelopes>,
    pub out_dir: PathBuf,
}

impl Default for BoundConfig {
    fn default() -> Self {
        let mut sim = SimConfig::desk();
        sim.gp_variance = 0.0;
        Self {
            sim,
            field_seed: 1,
            windows: vec![[5.0, 2.0], [15.0, 8.0]],
            beta0: 1.0,
            beta1: 2.0,
            n_points: 20,
            point_seed: 1,
            grid: ReferenceGrid::default(),
            envelopes: None,
            out_dir: PathBuf::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub observed: PathBuf,
    pub predictions: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuffersConfig {
    pub response: PathBuf,
    pub covariate: PathBuf,
    pub radius: f64,
    pub lag: f64,
    pub min_neighbors: usize,
    pub out: PathBuf,
}

impl Default for BuffersConfig {
    fn default() -> Self {
        Self {
            response: PathBuf::new(),
            covariate: PathBuf::new(),
            radius: 10.0,
            lag: 5.0,
            min_neighbors: 1,
            out: PathBuf::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::Variant;

    fn series() -> StSeries {
        let mut a = SiteSeries::new("a", Point::new(0.5, -1.25));
        a.push(1.0, Some(2.0));
        a.push(2.0, None);
        a.push(3.5, Some(0.1 + 0.2));
        let mut b = SiteSeries::new("b", Point::new(5.0, 1.0));
        b.push(1.0, Some(1e-300));
        StSeries::new(vec![a, b])
    }

    #[test]
    fn series_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_series(&p, &series(), true).unwrap();
        assert_eq!(read_series(&p).unwrap(), series());
        write_series(&p, &series(), false).unwrap();
        let back = read_series(&p).unwrap();
        assert_eq!(back.sites[0].times, vec![1.0, 3.5]);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("site_id,x_km,y_km,t_day,value\n"));
    }

    #[test]
    fn moving_site_is_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        std::fs::write(&p, "site_id,x_km,y_km,t_day,value\na,0,0,1,1\na,0,1,2,1\n").unwrap();
        let e = read_series(&p).unwrap_err().to_string();
        assert!(e.contains("line 3"), "{e}");
    }

    #[test]
    fn predictions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        let preds = vec![
            Prediction {
                site_id: "a".into(),
                coord: Point::new(1.0, 2.0),
                time: 3.0,
                interval: Some(Interval { median: 1.5, lo95: 0.25, hi95: 2.75 }),
            },
            Prediction {
                site_id: "b".into(),
                coord: Point::new(1.0, 2.0),
                time: 4.0,
                interval: None,
            },
        ];
        write_predictions(&p, &preds).unwrap();
        assert_eq!(read_predictions(&p).unwrap(), preds);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("site_id,x_km,y_km,t_day,median,lo95,hi95,flagged\n"));
        assert!(text.contains("b,1.0,2.0,4.0,,,,1"), "{text}");
    }

    #[test]
    fn config_errors_carry_location() {
        let e = parse_config("[fit]\nmodel = { variant = \"baseline\", radius = -1 }\nbogus = 3\n", "run.toml")
            .unwrap_err()
            .to_string();
        assert!(e.contains("run.toml") && e.contains("line 3"), "{e}");
        let ok = parse_config(
            "threads = 2\n[fit]\nresponse = \"y.csv\"\ncovariate = \"x.csv\"\n[fit.model]\nvariant = \"functional_mean\"\nradius = 20.0\n[fit.mcmc]\nn_iter = 100\nn_warmup = 50\n",
            "run.toml",
        )
        .unwrap();
        let fit = ok.fit.unwrap();
        assert_eq!(fit.model.variant, Variant::FunctionalMean);
        assert_eq!(fit.model.lag, 5.0);
        assert_eq!(fit.mcmc.n_chains, 4);
        assert_eq!(ok.threads, Some(2));
    }
}
