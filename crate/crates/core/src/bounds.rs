//! Mean discrepancy between a true and a misspecified buffer, with the
//! annulus/time-slab bound and its tail-envelope relaxation.
//!
//! Both means integrate the same kernel (the true window's normalizing
//! constants, untruncated exponentials) against the covariate field; only the
//! integration domain `B_r × [0, q]` differs. The space-time region up to the
//! larger radius and lag is split at the smaller radius and lag into four
//! cells:
//!
//! ```text
//!              lag [0, q_min]      lag [q_min, q_max]
//! inner ball   inner_short         inner_long
//! annulus      ring_short          ring_long
//! ```
//!
//! Each window is a union of cells, so the exact discrepancy and the bound are
//! signed and unsigned sums of the same four integrals.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CovariateField, Point};
use crate::kernels::{exp_mass, KernelSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundError {
    #[error("windows must share kernel scales, got (xi1={true_space}, xi2={true_time}) and (xi1={alt_space}, xi2={alt_time})")]
    ScaleMismatch {
        true_space: f64,
        true_time: f64,
        alt_space: f64,
        alt_time: f64,
    },
    #[error("{which} envelope {delta} is exceeded by the kernel tail value {value} at {at}")]
    InvalidEnvelope {
        which: &'static str,
        delta: f64,
        value: f64,
        at: f64,
    },
    #[error("tail envelope bound needs the alternative window to contain the true one (r={r}, r_alt={r_alt}, q={q}, q_alt={q_alt})")]
    WindowOrder { r: f64, r_alt: f64, q: f64, q_alt: f64 },
    #[error("reference quadrature unresolved: relative change {change:.3e} between steps {coarse} and {fine} exceeds {tolerance}")]
    Unresolved {
        change: f64,
        coarse: f64,
        fine: f64,
        tolerance: f64,
    },
    #[error("quadrature steps must be positive, got {space} km and {time} days")]
    InvalidStep { space: f64, time: f64 },
}

/// Midpoint-rule resolution for the reference integrals. Every integral is
/// also computed at twice the step and the report is rejected when the two
/// disagree by more than `tolerance` relative to the total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceGrid {
    pub space_step: f64,
    pub time_step: f64,
    pub tolerance: f64,
}

impl Default for ReferenceGrid {
    fn default() -> Self {
        Self {
            space_step: 0.25,
            time_step: 0.25,
            tolerance: 0.01,
        }
    }
}

/// Tail envelopes of the spatial and temporal kernels beyond the true
/// radius and lag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Envelopes {
    pub space: f64,
    pub time: f64,
}

impl Envelopes {
    /// The kernel's own values at the true radius and lag.
    pub fn at_window_edge(spec: &KernelSpec) -> Self {
        Self {
            space: spec.c_space * (-spec.radius / spec.xi_space).exp(),
            time: spec.c_time * (-spec.lag / spec.xi_time).exp(),
        }
    }

    /// Checks both envelopes against the untruncated kernel tails on a
    /// geometric grid reaching fifty scale lengths past the window edge.
    pub fn check(&self, spec: &KernelSpec) -> Result<(), BoundError> {
        let probe = |which: &'static str, delta: f64, edge: f64, xi: f64, c: f64| {
            if !(delta > 0.0 && delta.is_finite()) {
                return Err(BoundError::InvalidEnvelope {
                    which,
                    delta,
                    value: c * (-edge / xi).exp(),
                    at: edge,
                });
            }
            let span = 50.0 * xi;
            for k in 0..=400 {
                let at = edge + span * (1e-12f64).powf(1.0 - k as f64 / 400.0).min(1.0);
                let value = c * (-at / xi).exp();
                if value > delta {
                    return Err(BoundError::InvalidEnvelope { which, delta, value, at });
                }
            }
            Ok(())
        };
        probe("spatial", self.space, spec.radius, spec.xi_space, spec.c_space)?;
        probe("temporal", self.time, spec.lag, spec.xi_time, spec.c_time)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub location: Point,
    pub time: f64,
    pub mean_true: f64,
    pub mean_alt: f64,
    /// `|μ − μ̃|` from the signed cell sum.
    pub actual: f64,
    pub prop_bound: f64,
    /// Tail-envelope bound; only defined when the alternative window
    /// contains the true one.
    pub envelope_bound: Option<f64>,
    pub annulus_term: f64,
    pub slab_term: f64,
    pub sup_annulus: f64,
    pub sup_ball_slab: f64,
    pub envelopes: Envelopes,
    pub field_min: f64,
    /// Dominance is only asserted for nonnegative fields.
    pub dominance_asserted: bool,
    pub dominates: bool,
}

/// The four cell integrals of `κ X` and extrema of `X` on the grid nodes.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Cells {
    inner_short: f64,
    inner_long: f64,
    ring_short: f64,
    ring_long: f64,
    sup_ring_short: f64,
    sup_long: f64,
    min: f64,
}

impl Cells {
    fn total(&self) -> f64 {
        self.inner_short.abs() + self.inner_long.abs() + self.ring_short.abs() + self.ring_long.abs()
    }
}

struct Region {
    rho: (f64, f64),
    lag: (f64, f64),
}

/// `∫_a^b e^{-x/xi} x dx`.
fn exp_radial_mass(a: f64, b: f64, xi: f64) -> f64 {
    xi * ((a + xi) * (-a / xi).exp() - (b + xi) * (-b / xi).exp())
}

/// `∫_a^b e^{-x/xi} x² dx`.
fn exp_radial_moment(a: f64, b: f64, xi: f64) -> f64 {
    let g = |x: f64| xi * (-x / xi).exp() * (x * x + 2.0 * xi * x + 2.0 * xi * xi);
    g(a) - g(b)
}

/// `(∫∫ κ X, max X, min X)` over an annulus × lag interval in polar
/// coordinates. The kernel is integrated exactly over each cell and `X` is
/// sampled at the kernel-weighted centroid of the cell in radius and lag.
fn integrate(field: &dyn CovariateField, spec: &KernelSpec, s: Point, t: f64, region: &Region, h: f64, tau: f64) -> (f64, f64, f64) {
    let (r0, r1) = region.rho;
    let (l0, l1) = region.lag;
    if r1 <= r0 || l1 <= l0 {
        return (0.0, f64::NEG_INFINITY, f64::INFINITY);
    }
    let n_rho = ((r1 - r0) / h).ceil().max(1.0) as usize;
    let d_rho = (r1 - r0) / n_rho as f64;
    let n_lag = ((l1 - l0) / tau).ceil().max(1.0) as usize;
    let d_lag = (l1 - l0) / n_lag as f64;
    let lag_weights: Vec<(f64, f64)> = (0..n_lag)
        .map(|k| {
            let a = l0 + k as f64 * d_lag;
            let b = a + d_lag;
            let mass = exp_mass(a, b, spec.xi_time);
            // weighted centroid, ξ + (a e^{-a/ξ} - b e^{-b/ξ}) / ∫
            let xi = spec.xi_time;
            let l = xi + (a * (-a / xi).exp() - b * (-b / xi).exp()) / (mass / xi);
            (l.clamp(a, b), spec.c_time * mass)
        })
        .collect();
    let mut total = 0.0;
    let mut hi = f64::NEG_INFINITY;
    let mut lo = f64::INFINITY;
    for i in 0..n_rho {
        let outer = r0 + (i + 1) as f64 * d_rho;
        let n_theta = ((2.0 * PI * outer / h).ceil() as usize).max(8);
        let d_theta = 2.0 * PI / n_theta as f64;
        let inner = r0 + i as f64 * d_rho;
        let radial = exp_radial_mass(inner, outer, spec.xi_space);
        let rho = (exp_radial_moment(inner, outer, spec.xi_space) / radial).clamp(inner, outer);
        let ring_weight = spec.c_space * radial * d_theta;
        let mut ring = 0.0;
        for j in 0..n_theta {
            let theta = (j as f64 + 0.5) * d_theta;
            let p = Point::new(s.x + rho * theta.cos(), s.y + rho * theta.sin());
            for &(l, w) in &lag_weights {
                let x = field.value(p, t - l);
                hi = hi.max(x);
                lo = lo.min(x);
                ring += w * x;
            }
        }
        total += ring_weight * ring;
    }
    (total, hi, lo)
}

fn cells_at(field: &dyn CovariateField, spec: &KernelSpec, s: Point, t: f64, radii: (f64, f64), lags: (f64, f64), h: f64, tau: f64) -> Cells {
    let (r_min, r_max) = radii;
    let (q_min, q_max) = lags;
    let run = |rho, lag| integrate(field, spec, s, t, &Region { rho, lag }, h, tau);
    let inner_short = run((0.0, r_min), (0.0, q_min));
    let inner_long = run((0.0, r_min), (q_min, q_max));
    let ring_short = run((r_min, r_max), (0.0, q_min));
    let ring_long = run((r_min, r_max), (q_min, q_max));
    let finite_or_zero = |v: f64| if v.is_finite() { v } else { 0.0 };
    Cells {
        inner_short: inner_short.0,
        inner_long: inner_long.0,
        ring_short: ring_short.0,
        ring_long: ring_long.0,
        sup_ring_short: finite_or_zero(ring_short.1),
        sup_long: finite_or_zero(inner_long.1.max(ring_long.1)),
        min: finite_or_zero(inner_short.2.min(inner_long.2).min(ring_short.2).min(ring_long.2)),
    }
}

fn resolved_cells(
    field: &dyn CovariateField,
    spec: &KernelSpec,
    s: Point,
    t: f64,
    radii: (f64, f64),
    lags: (f64, f64),
    grid: &ReferenceGrid,
) -> Result<Cells, BoundError> {
    let (h, tau) = (grid.space_step, grid.time_step);
    if !(h > 0.0 && tau > 0.0 && h.is_finite() && tau.is_finite()) {
        return Err(BoundError::InvalidStep { space: h, time: tau });
    }
    let fine = cells_at(field, spec, s, t, radii, lags, h, tau);
    let coarse = cells_at(field, spec, s, t, radii, lags, 2.0 * h, 2.0 * tau);
    let scale = fine.total();
    if scale > 0.0 {
        let change = (fine.inner_short - coarse.inner_short).abs()
            + (fine.inner_long - coarse.inner_long).abs()
            + (fine.ring_short - coarse.ring_short).abs()
            + (fine.ring_long - coarse.ring_long).abs();
        let change = change / scale;
        if change > grid.tolerance {
            return Err(BoundError::Unresolved {
                change,
                coarse: 2.0 * h,
                fine: h,
                tolerance: grid.tolerance,
            });
        }
    }
    Ok(fine)
}

fn same_scales(truth: &KernelSpec, alt: &KernelSpec) -> Result<(), BoundError> {
    if truth.xi_space != alt.xi_space || truth.xi_time != alt.xi_time {
        return Err(BoundError::ScaleMismatch {
            true_space: truth.xi_space,
            true_time: truth.xi_time,
            alt_space: alt.xi_space,
            alt_time: alt.xi_time,
        });
    }
    Ok(())
}

/// `β1 δ1 δ2 [q̃ π (r̃² − r²) sup_annulus + (q̃ − q) π r̃² sup_slab]`.
#[allow(clippy::too_many_arguments)]
pub fn envelope_formula(beta1: f64, env: Envelopes, r: f64, r_alt: f64, q: f64, q_alt: f64, sup_annulus: f64, sup_ball_slab: f64) -> f64 {
    let dd = env.space * env.time;
    beta1.abs()
        * (dd * q_alt * PI * (r_alt * r_alt - r * r) * sup_annulus + dd * (q_alt - q) * PI * r_alt * r_alt * sup_ball_slab)
}

/// Full report at one point. `envelopes` defaults to the kernel values at the
/// true window edge.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_point(
    field: &dyn CovariateField,
    truth: &KernelSpec,
    alt: &KernelSpec,
    beta0: f64,
    beta1: f64,
    s: Point,
    t: f64,
    grid: &ReferenceGrid,
    envelopes: Option<Envelopes>,
) -> Result<BoundReport, BoundError> {
    same_scales(truth, alt)?;
    let (r, q, ra, qa) = (truth.radius, truth.lag, alt.radius, alt.lag);
    let radii = (r.min(ra), r.max(ra));
    let lags = (q.min(qa), q.max(qa));
    let cells = resolved_cells(field, truth, s, t, radii, lags, grid)?;

    // which cells each window covers
    let covers = |rad: f64, lag: f64| {
        let ring = rad > radii.0;
        let long = lag > lags.0;
        [true, long, ring, ring && long]
    };
    let values = [cells.inner_short, cells.inner_long, cells.ring_short, cells.ring_long];
    let in_true = covers(r, q);
    let in_alt = covers(ra, qa);
    let window_sum = |mask: [bool; 4]| -> f64 { values.iter().zip(mask).filter(|(_, m)| *m).map(|(v, _)| v).sum() };
    let mean_true = beta0 + beta1 * window_sum(in_true);
    let mean_alt = beta0 + beta1 * window_sum(in_alt);
    let mut signed = 0.0;
    for k in 0..4 {
        match (in_true[k], in_alt[k]) {
            (true, false) => signed += values[k],
            (false, true) => signed -= values[k],
            _ => {}
        }
    }
    let actual = beta1.abs() * signed.abs();

    let annulus_term = beta1.abs() * (cells.ring_short + cells.ring_long);
    let slab_term = beta1.abs() * (cells.inner_long + cells.ring_long);
    let prop_bound = annulus_term + slab_term;

    let env = envelopes.unwrap_or_else(|| Envelopes::at_window_edge(truth));
    let envelope_bound = if ra >= r && qa >= q {
        env.check(truth)?;
        Some(envelope_formula(beta1, env, r, ra, q, qa, cells.sup_ring_short, cells.sup_long))
    } else {
        None
    };
    let dominance_asserted = cells.min >= 0.0;
    Ok(BoundReport {
        location: s,
        time: t,
        mean_true,
        mean_alt,
        actual,
        prop_bound,
        envelope_bound,
        annulus_term,
        slab_term,
        sup_annulus: cells.sup_ring_short,
        sup_ball_slab: cells.sup_long,
        envelopes: env,
        field_min: cells.min,
        dominance_asserted,
        dominates: prop_bound >= actual,
    })
}

/// `(μ, μ̃)` at `(s, t)`.
#[allow(clippy::too_many_arguments)]
pub fn mean_pair(
    field: &dyn CovariateField,
    truth: &KernelSpec,
    alt: &KernelSpec,
    beta0: f64,
    beta1: f64,
    s: Point,
    t: f64,
    grid: &ReferenceGrid,
) -> Result<(f64, f64), BoundError> {
    let rep = evaluate_point(field, truth, alt, beta0, beta1, s, t, grid, None)?;
    Ok((rep.mean_true, rep.mean_alt))
}

pub fn prop_bound(
    field: &dyn CovariateField,
    truth: &KernelSpec,
    alt: &KernelSpec,
    beta1: f64,
    s: Point,
    t: f64,
    grid: &ReferenceGrid,
) -> Result<f64, BoundError> {
    Ok(evaluate_point(field, truth, alt, 0.0, beta1, s, t, grid, None)?.prop_bound)
}

#[allow(clippy::too_many_arguments)]
pub fn envelope_bound(
    field: &dyn CovariateField,
    truth: &KernelSpec,
    r_alt: f64,
    q_alt: f64,
    beta1: f64,
    envelopes: Envelopes,
    s: Point,
    t: f64,
    grid: &ReferenceGrid,
) -> Result<f64, BoundError> {
    if r_alt < truth.radius || q_alt < truth.lag {
        return Err(BoundError::WindowOrder {
            r: truth.radius,
            r_alt,
            q: truth.lag,
            q_alt,
        });
    }
    let alt = KernelSpec { radius: r_alt, lag: q_alt, ..*truth };
    let rep = evaluate_point(field, truth, &alt, 0.0, beta1, s, t, grid, Some(envelopes))?;
    Ok(rep.envelope_bound.unwrap_or(0.0))
}

/// Reports at many points, evaluated in parallel; order follows `points`.
#[allow(clippy::too_many_arguments)]
pub fn bound_report(
    field: &dyn CovariateField,
    truth: &KernelSpec,
    alt: &KernelSpec,
    beta0: f64,
    beta1: f64,
    points: &[(Point, f64)],
    grid: &ReferenceGrid,
    envelopes: Option<Envelopes>,
) -> Result<Vec<BoundReport>, BoundError> {
    points
        .par_iter()
        .map(|&(s, t)| evaluate_point(field, truth, alt, beta0, beta1, s, t, grid, envelopes))
        .collect()
}
