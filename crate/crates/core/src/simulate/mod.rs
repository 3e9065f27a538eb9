//! Synthetic covariate fields and kernel-integrated responses.
//!
//! The covariate is log-Gaussian: three anisotropic Gaussian bumps whose
//! centres are redrawn at every time slot, plus a zero-mean Gaussian field
//! with exponential covariance. It lives on a regular grid and is treated as
//! piecewise constant: nearest grid node in space, and slot `k` with time
//! stamp `τ_k` covers `(τ_k - dt, τ_k]`.

mod study;

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use study::{run_study, summarize_study, Scenario, ScenarioSummary, StudyConfig, StudyRow};

use crate::data::{CovariateField, Point, SiteSeries, StSeries};
use crate::error::{Error, Result};
use crate::kernels::{exp_mass, KernelSpec};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Domain {
    pub fn square(side: f64) -> Self {
        Self {
            x_min: 0.0,
            x_max: side,
            y_min: 0.0,
            y_max: side,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub amplitude: f64,
    pub width_x: f64,
    pub width_y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub domain: Domain,
    /// Covariate grid spacing (km).
    pub grid_step: f64,
    /// Covariate sampling interval (days).
    pub time_step: f64,
    pub n_sites: usize,
    pub n_fit: usize,
    /// Number of daily response times.
    pub n_times: usize,
    /// Covariate days simulated before the first response day.
    pub lead_days: usize,
    /// Response sites keep at least this distance from the domain edge.
    pub site_margin: f64,
    pub peaks: Vec<Peak>,
    pub gp_variance: f64,
    pub gp_range: f64,
    pub gp_jitter: f64,
    pub radius: f64,
    pub lag: f64,
    pub xi_space: f64,
    pub xi_time: f64,
    pub beta0: f64,
    pub beta1: f64,
    pub noise_sd: f64,
    /// Sub-grid step of the reference quadrature for the noiseless mean.
    pub truth_step: f64,
    pub truth_tolerance: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            domain: Domain::square(100.0),
            grid_step: 1.0,
            time_step: 1.0,
            n_sites: 100,
            n_fit: 25,
            n_times: 153,
            lead_days: 8,
            site_margin: 15.0,
            peaks: vec![
                Peak {
                    amplitude: 1.0,
                    width_x: 50.0,
                    width_y: 10.0,
                },
                Peak {
                    amplitude: 1.5,
                    width_x: 70.0,
                    width_y: 15.0,
                },
                Peak {
                    amplitude: 0.5,
                    width_x: 40.0,
                    width_y: 8.0,
                },
            ],
            gp_variance: 1.0,
            gp_range: 0.1,
            gp_jitter: 1e-10,
            radius: 10.0,
            lag: 5.0,
            xi_space: 2.0,
            xi_time: 0.5,
            beta0: 1.0,
            beta1: 2.0,
            noise_sd: 0.25,
            truth_step: 0.125,
            truth_tolerance: 0.01,
            seed: 1,
        }
    }
}

impl SimConfig {
    /// Reduced study: 60 km domain, 50 sites, 60 days, 15 fitting sites.
    pub fn desk() -> Self {
        Self {
            domain: Domain::square(60.0),
            n_sites: 50,
            n_fit: 15,
            n_times: 60,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("grid_step", self.grid_step)?;
        positive("time_step", self.time_step)?;
        positive("radius", self.radius)?;
        positive("lag", self.lag)?;
        positive("xi_space", self.xi_space)?;
        positive("xi_time", self.xi_time)?;
        positive("noise_sd", self.noise_sd)?;
        positive("gp_range", self.gp_range)?;
        positive("truth_step", self.truth_step)?;
        positive("truth_tolerance", self.truth_tolerance)?;
        if !(self.gp_variance >= 0.0 && self.gp_jitter >= 0.0) {
            return Err(Error::config("gp_variance and gp_jitter must be nonnegative"));
        }
        for (k, p) in self.peaks.iter().enumerate() {
            if !(p.amplitude > 0.0 && p.width_x > 0.0 && p.width_y > 0.0) {
                return Err(Error::config(format!("peak {k}: amplitude and widths must be positive")));
            }
        }
        if self.n_fit > self.n_sites {
            return Err(Error::config(format!(
                "n_fit ({}) exceeds n_sites ({})",
                self.n_fit, self.n_sites
            )));
        }
        let d = &self.domain;
        if !(d.width() > 2.0 * self.site_margin && d.height() > 2.0 * self.site_margin) {
            return Err(Error::config("domain is too small for the site margin"));
        }
        Ok(())
    }

    pub fn kernel(&self) -> Result<KernelSpec> {
        Ok(KernelSpec::normalize(self.radius, self.lag, self.xi_space, self.xi_time)?)
    }

    /// Daily response times, after the lead-in period.
    pub fn response_times(&self) -> Vec<f64> {
        (1..=self.n_times).map(|d| (self.lead_days + d) as f64).collect()
    }

    pub fn n_slots(&self) -> usize {
        (((self.lead_days + self.n_times) as f64) / self.time_step).round() as usize
    }
}

/// Covariate values on a regular grid, piecewise constant in space and time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridField {
    pub origin: Point,
    pub step: f64,
    pub nx: usize,
    pub ny: usize,
    pub first_time: f64,
    pub time_step: f64,
    /// `values[slot][iy * nx + ix]`.
    pub values: Vec<Vec<f64>>,
}

impl GridField {
    pub fn n_nodes(&self) -> usize {
        self.nx * self.ny
    }

    pub fn n_slots(&self) -> usize {
        self.values.len()
    }

    pub fn node(&self, k: usize) -> Point {
        let (ix, iy) = (k % self.nx, k / self.nx);
        Point::new(
            self.origin.x + ix as f64 * self.step,
            self.origin.y + iy as f64 * self.step,
        )
    }

    pub fn slot_time(&self, k: usize) -> f64 {
        self.first_time + k as f64 * self.time_step
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_slots()).map(|k| self.slot_time(k)).collect()
    }

    /// Slot covering `t`, clamped to the simulated range.
    pub fn slot_at(&self, t: f64) -> usize {
        // slots cover (τ - dt, τ]; the offset absorbs rounding of τ itself
        let k = ((t - self.first_time) / self.time_step - 1e-9).ceil();
        (k.max(0.0) as usize).min(self.n_slots().saturating_sub(1))
    }

    /// Nearest node, clamped to the grid.
    pub fn node_at(&self, p: Point) -> usize {
        let ix = ((p.x - self.origin.x) / self.step).round().clamp(0.0, (self.nx - 1) as f64) as usize;
        let iy = ((p.y - self.origin.y) / self.step).round().clamp(0.0, (self.ny - 1) as f64) as usize;
        iy * self.nx + ix
    }

    pub fn node_id(&self, k: usize) -> String {
        format!("g{}_{}", k % self.nx, k / self.nx)
    }

    /// One site per node, one entry per slot.
    pub fn to_series(&self) -> StSeries {
        let times = self.times();
        StSeries::new(
            (0..self.n_nodes())
                .map(|k| {
                    let mut s = SiteSeries::new(self.node_id(k), self.node(k));
                    for (slot, &t) in times.iter().enumerate() {
                        s.push(t, Some(self.values[slot][k]));
                    }
                    s
                })
                .collect(),
        )
    }
}

impl CovariateField for GridField {
    fn value(&self, p: Point, t: f64) -> f64 {
        self.values[self.slot_at(t)][self.node_at(p)]
    }
}

/// Zero-mean Gaussian field with covariance `σ² exp(-h/φ)` sampled through a
/// dense Cholesky factor.
#[derive(Debug, Clone)]
pub struct GaussianField {
    lower: DMatrix<f64>,
}

impl GaussianField {
    pub fn exponential(points: &[Point], variance: f64, range: f64, jitter: f64) -> Result<Self> {
        let n = points.len();
        let cov = DMatrix::from_fn(n, n, |i, j| {
            let c = variance * (-points[i].dist(&points[j]) / range).exp();
            if i == j {
                c + jitter
            } else {
                c
            }
        });
        let chol = cov.cholesky().ok_or_else(|| {
            Error::numerical(format!(
                "covariance of {n} points is not positive definite with jitter {jitter}; increase gp_jitter"
            ))
        })?;
        Ok(Self { lower: chol.unpack() })
    }

    pub fn len(&self) -> usize {
        self.lower.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.len();
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let mut out = vec![0.0; n];
        let data = self.lower.as_slice();
        for (j, &zj) in z.iter().enumerate() {
            let col = &data[j * n..(j + 1) * n];
            for i in j..n {
                out[i] += col[i] * zj;
            }
        }
        out
    }
}

/// Sum of the anisotropic bumps at `p` for the given centres.
pub fn bump_mean(peaks: &[Peak], centers: &[Point], p: Point) -> f64 {
    peaks
        .iter()
        .zip(centers)
        .map(|(pk, c)| {
            let dx = p.x - c.x;
            let dy = p.y - c.y;
            pk.amplitude * (-(dx * dx / (2.0 * pk.width_x * pk.width_x) + dy * dy / (2.0 * pk.width_y * pk.width_y))).exp()
        })
        .sum()
}

/// Noiseless mean and noisy response at a set of sites.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseSim {
    pub sites: Vec<Point>,
    pub times: Vec<f64>,
    /// `mean[site][time] = β0 + β1 W`.
    pub mean: Vec<Vec<f64>>,
    pub series: StSeries,
}

/// One replicate: covariate field, response at all sites, and the split
/// into fitting and held-out sites.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub field: GridField,
    pub response: ResponseSim,
    pub n_fit: usize,
}

impl SimulatedData {
    pub fn fit_response(&self) -> StSeries {
        self.response.series.filter_sites(|k, _| k < self.n_fit)
    }

    pub fn held_out_response(&self) -> StSeries {
        self.response.series.filter_sites(|k, _| k >= self.n_fit)
    }

    pub fn held_out_mean(&self) -> &[Vec<f64>] {
        &self.response.mean[self.n_fit..]
    }
}

/// Generator with the Gaussian-field factor computed once.
#[derive(Debug, Clone)]
pub struct Simulator {
    cfg: SimConfig,
    nodes: (usize, usize),
    gp: Option<GaussianField>,
}

impl Simulator {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        let nx = (cfg.domain.width() / cfg.grid_step).round() as usize + 1;
        let ny = (cfg.domain.height() / cfg.grid_step).round() as usize + 1;
        let gp = if cfg.gp_variance > 0.0 {
            let points: Vec<Point> = (0..nx * ny)
                .map(|k| {
                    Point::new(
                        cfg.domain.x_min + (k % nx) as f64 * cfg.grid_step,
                        cfg.domain.y_min + (k / nx) as f64 * cfg.grid_step,
                    )
                })
                .collect();
            Some(GaussianField::exponential(&points, cfg.gp_variance, cfg.gp_range, cfg.gp_jitter)?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            nodes: (nx, ny),
            gp,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn covariate<R: Rng + ?Sized>(&self, rng: &mut R) -> GridField {
        let cfg = &self.cfg;
        let (nx, ny) = self.nodes;
        let d = cfg.domain;
        let mut field = GridField {
            origin: Point::new(d.x_min, d.y_min),
            step: cfg.grid_step,
            nx,
            ny,
            first_time: cfg.time_step,
            time_step: cfg.time_step,
            values: Vec::with_capacity(cfg.n_slots()),
        };
        for _ in 0..cfg.n_slots() {
            let centers: Vec<Point> = cfg
                .peaks
                .iter()
                .map(|_| {
                    Point::new(
                        rng.random_range(d.x_min..=d.x_max),
                        rng.random_range(d.y_min..=d.y_max),
                    )
                })
                .collect();
            let noise = self.gp.as_ref().map(|g| g.sample(rng));
            let slot = (0..nx * ny)
                .map(|k| {
                    let log_x = bump_mean(&cfg.peaks, &centers, field.node(k)) + noise.as_ref().map_or(0.0, |z| z[k]);
                    log_x.exp()
                })
                .collect();
            field.values.push(slot);
        }
        field
    }

    /// Response sites drawn uniformly inside the margin-shrunk domain.
    pub fn sites<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Point> {
        let d = self.cfg.domain;
        let m = self.cfg.site_margin;
        (0..self.cfg.n_sites)
            .map(|_| {
                Point::new(
                    rng.random_range(d.x_min + m..=d.x_max - m),
                    rng.random_range(d.y_min + m..=d.y_max - m),
                )
            })
            .collect()
    }

    pub fn replicate(&self, seed: u64) -> Result<SimulatedData> {
        let mut rng = rng::stream(seed, 0);
        let field = self.covariate(&mut rng);
        let sites = self.sites(&mut rng);
        let response = simulate_response_with(&field, &sites, &self.cfg, &mut rng)?;
        Ok(SimulatedData {
            field,
            response,
            n_fit: self.cfg.n_fit,
        })
    }
}

pub fn simulate_covariate(cfg: &SimConfig, seed: u64) -> Result<GridField> {
    Ok(Simulator::new(cfg.clone())?.covariate(&mut rng::stream(seed, 0)))
}

pub fn simulate_response(field: &GridField, sites: &[Point], cfg: &SimConfig, seed: u64) -> Result<ResponseSim> {
    cfg.validate()?;
    simulate_response_with(field, sites, cfg, &mut rng::stream(seed, 1))
}

/// Spatial kernel mass `∫ κ1` attached to each grid node for a disk around
/// `s`, by midpoint sub-sampling of every node cell at `step`.
fn node_weights(field: &GridField, s: Point, spec: &KernelSpec, step: f64) -> Vec<(usize, f64)> {
    let m = (field.step / step).ceil().max(1.0) as usize;
    let sub = field.step / m as f64;
    let reach = spec.radius + field.step;
    let ix0 = (((s.x - reach - field.origin.x) / field.step).floor().max(0.0)) as usize;
    let iy0 = (((s.y - reach - field.origin.y) / field.step).floor().max(0.0)) as usize;
    let ix1 = ((((s.x + reach - field.origin.x) / field.step).ceil()) as usize).min(field.nx - 1);
    let iy1 = ((((s.y + reach - field.origin.y) / field.step).ceil()) as usize).min(field.ny - 1);
    let mut out = Vec::new();
    for iy in iy0..=iy1 {
        for ix in ix0..=ix1 {
            let k = iy * field.nx + ix;
            let c = field.node(k);
            let mut w = 0.0;
            for a in 0..m {
                for b in 0..m {
                    let p = Point::new(
                        c.x - 0.5 * field.step + (a as f64 + 0.5) * sub,
                        c.y - 0.5 * field.step + (b as f64 + 0.5) * sub,
                    );
                    let h = p.dist(&s);
                    if h <= spec.radius {
                        w += spec.c_space * (-h / spec.xi_space).exp();
                    }
                }
            }
            if w > 0.0 {
                out.push((k, w * sub * sub));
            }
        }
    }
    out
}

/// `W(s, t)` of the piecewise-constant field with exact temporal kernel mass
/// per slot.
fn field_predictor(field: &GridField, weights: &[(usize, f64)], spec: &KernelSpec, t: f64) -> f64 {
    let dt = field.time_step;
    let lo = field.slot_at(t - spec.lag);
    let hi = field.slot_at(t);
    let mut total = 0.0;
    for slot in lo..=hi {
        let tau = field.slot_time(slot);
        let a = (t - tau).max(0.0);
        let b = (t - tau + dt).min(spec.lag);
        if b <= a {
            continue;
        }
        let mass = spec.c_time * exp_mass(a, b, spec.xi_time);
        let row = &field.values[slot];
        let spatial: f64 = weights.iter().map(|&(k, w)| w * row[k]).sum();
        total += mass * spatial;
    }
    total
}

/// Reference `W` at every site and time, checked against the same quadrature
/// at twice the sub-grid step.
pub fn reference_predictor(field: &GridField, sites: &[Point], times: &[f64], spec: &KernelSpec, step: f64, tolerance: f64) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(sites.len());
    let mut worst = 0.0f64;
    for &s in sites {
        let fine = node_weights(field, s, spec, step);
        let coarse = node_weights(field, s, spec, 2.0 * step);
        let row: Vec<f64> = times
            .iter()
            .map(|&t| {
                let w = field_predictor(field, &fine, spec, t);
                let wc = field_predictor(field, &coarse, spec, t);
                if w != 0.0 {
                    worst = worst.max((w - wc).abs() / w.abs());
                }
                w
            })
            .collect();
        out.push(row);
    }
    if worst > tolerance {
        return Err(Error::numerical(format!(
            "reference quadrature unresolved: relative change {worst:.3e} between sub-grid steps {} and {step} exceeds {tolerance}; refine truth_step",
            2.0 * step
        )));
    }
    Ok(out)
}

fn simulate_response_with<R: Rng + ?Sized>(field: &GridField, sites: &[Point], cfg: &SimConfig, rng: &mut R) -> Result<ResponseSim> {
    let spec = cfg.kernel()?;
    let times = cfg.response_times();
    let w = reference_predictor(field, sites, &times, &spec, cfg.truth_step, cfg.truth_tolerance)?;
    let mean: Vec<Vec<f64>> = w
        .iter()
        .map(|row| row.iter().map(|&v| cfg.beta0 + cfg.beta1 * v).collect())
        .collect();
    let series = StSeries::new(
        sites
            .iter()
            .enumerate()
            .map(|(n, &p)| {
                let mut s = SiteSeries::new(format!("s{n:03}"), p);
                for (&t, &mu) in times.iter().zip(&mean[n]) {
                    let e: f64 = rng.sample(StandardNormal);
                    s.push(t, Some(mu + cfg.noise_sd * e));
                }
                s
            })
            .collect(),
    );
    Ok(ResponseSim {
        sites: sites.to_vec(),
        times,
        mean,
        series,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPattern {
    Mcar,
    Blocky,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Missingness {
    pub pattern: MissingPattern,
    pub rate: f64,
    /// Disk radii for blocky masks (km).
    #[serde(default = "default_radius_min")]
    pub radius_min: f64,
    #[serde(default = "default_radius_max")]
    pub radius_max: f64,
}

fn default_radius_min() -> f64 {
    5.0
}

fn default_radius_max() -> f64 {
    20.0
}

impl Missingness {
    pub fn new(pattern: MissingPattern, rate: f64) -> Self {
        Self {
            pattern,
            rate,
            radius_min: default_radius_min(),
            radius_max: default_radius_max(),
        }
    }
}

/// Masks present entries of `x`. Mcar drops each entry independently with
/// probability `rate`; blocky drops, per time stamp, the entries inside a
/// union of random disks, shrinking the last disk so that the masked count
/// equals `round(rate · n)`.
pub fn inject_missingness(x: &StSeries, spec: &Missingness, seed: u64) -> Result<StSeries> {
    if !(0.0..1.0).contains(&spec.rate) {
        return Err(Error::config(format!("missing rate must lie in [0, 1), got {}", spec.rate)));
    }
    if !(spec.radius_min > 0.0 && spec.radius_max >= spec.radius_min) {
        return Err(Error::config("blocky radii must satisfy 0 < radius_min <= radius_max"));
    }
    let mut out = x.clone();
    if spec.rate == 0.0 {
        return Ok(out);
    }
    let mut rng = rng::stream(seed, 2);
    match spec.pattern {
        MissingPattern::Mcar => {
            for s in &mut out.sites {
                for v in &mut s.values {
                    if v.is_some() && rng.random::<f64>() < spec.rate {
                        *v = None;
                    }
                }
            }
        }
        MissingPattern::Blocky => {
            let mut by_time: BTreeMap<i64, Vec<(usize, usize)>> = BTreeMap::new();
            for (m, s) in out.sites.iter().enumerate() {
                for (k, (t, v)) in s.times.iter().zip(&s.values).enumerate() {
                    if v.is_some() {
                        by_time.entry(total_order_key(*t)).or_default().push((m, k));
                    }
                }
            }
            let (lo, hi) = bounding_box(&out);
            for entries in by_time.values() {
                let target = (spec.rate * entries.len() as f64).round() as usize;
                let mut masked = vec![false; entries.len()];
                let mut count = 0;
                while count < target {
                    let c = Point::new(rng.random_range(lo.x..=hi.x), rng.random_range(lo.y..=hi.y));
                    let radius = rng.random_range(spec.radius_min..=spec.radius_max);
                    let mut inside: Vec<(f64, usize)> = entries
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| !masked[*j])
                        .map(|(j, &(m, _))| (out.sites[m].coord.dist(&c), j))
                        .filter(|(d, _)| *d <= radius)
                        .collect();
                    inside.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                    // shrink the disk when it would overshoot the target
                    for &(_, j) in inside.iter().take(target - count) {
                        masked[j] = true;
                        count += 1;
                    }
                }
                for (j, &(m, k)) in entries.iter().enumerate() {
                    if masked[j] {
                        out.sites[m].values[k] = None;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn total_order_key(t: f64) -> i64 {
    let bits = t.to_bits() as i64;
    bits ^ (((bits >> 63) as u64) >> 1) as i64
}

fn bounding_box(x: &StSeries) -> (Point, Point) {
    let mut lo = Point::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for s in &x.sites {
        lo.x = lo.x.min(s.coord.x);
        lo.y = lo.y.min(s.coord.y);
        hi.x = hi.x.max(s.coord.x);
        hi.y = hi.y.max(s.coord.y);
    }
    (lo, hi)
}

/// Fraction of entries without a value.
pub fn missing_fraction(x: &StSeries) -> f64 {
    let total = x.n_entries();
    if total == 0 {
        return 0.0;
    }
    (total - x.n_present()) as f64 / total as f64
}
