//! Benchmark regression on same-day covariate averages near each site.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::predict::{thinned, Interval, Prediction};
use super::sampler::{PosteriorSamples, Sampler};
use super::{McmcConfig, ModelSpec, Variant};
use crate::data::StSeries;
use crate::error::{Error, Result};
use crate::rng;

/// A response entry with the mean of the covariate observed within the
/// radius on the same day, `(t - 1, t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollocatedRow {
    pub site: usize,
    pub time_index: usize,
    pub time: f64,
    pub response: Option<f64>,
    pub covariate: Option<f64>,
}

pub fn collocated_covariate(y: &StSeries, x: &StSeries, radius: f64) -> Vec<CollocatedRow> {
    let mut out = Vec::with_capacity(y.n_entries());
    for (si, site) in y.sites.iter().enumerate() {
        let near: Vec<usize> = x
            .sites
            .iter()
            .enumerate()
            .filter(|(_, s)| s.coord.dist(&site.coord) <= radius)
            .map(|(k, _)| k)
            .collect();
        for (ti, (&t, &v)) in site.times.iter().zip(&site.values).enumerate() {
            let mut sum = 0.0;
            let mut n = 0usize;
            for &k in &near {
                let xs = &x.sites[k];
                let from = xs.times.partition_point(|&u| u <= t - 1.0);
                let to = xs.times.partition_point(|&u| u <= t);
                for j in from..to {
                    if let Some(val) = xs.values[j] {
                        sum += val;
                        n += 1;
                    }
                }
            }
            out.push(CollocatedRow {
                site: si,
                time_index: ti,
                time: t,
                response: v,
                covariate: (n > 0).then(|| sum / n as f64),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollocatedFit {
    pub samples: PosteriorSamples,
    pub n_paired: usize,
    /// Responses without a same-day covariate average.
    pub n_dropped: usize,
}

pub fn fit_collocated(y: &StSeries, x: &StSeries, spec: &ModelSpec, cfg: &McmcConfig) -> Result<CollocatedFit> {
    let rows = collocated_covariate(y, x, spec.collocated_radius);
    let mut ys = Vec::new();
    let mut ts = Vec::new();
    let mut ws = Vec::new();
    let mut dropped = 0;
    for r in &rows {
        match (r.response, r.covariate) {
            (Some(v), Some(w)) => {
                ys.push(v);
                ts.push(r.time);
                ws.push(w);
            }
            (Some(_), None) => dropped += 1,
            _ => {}
        }
    }
    let mut spec = spec.clone();
    spec.variant = Variant::Collocated;
    let n_paired = ys.len();
    let samples = Sampler::with_fixed_w(&spec, ys, ts, ws)?.run(cfg)?;
    Ok(CollocatedFit {
        samples,
        n_paired,
        n_dropped: dropped,
    })
}

/// Predictions at every entry of `y`; entries with no covariate nearby on
/// the same day are flagged.
pub fn predict_collocated(
    samples: &PosteriorSamples,
    y: &StSeries,
    x: &StSeries,
    n_draws: usize,
    seed: u64,
) -> Result<Vec<Prediction>> {
    if samples.spec.variant != Variant::Collocated {
        return Err(Error::config("not a collocated fit"));
    }
    let rows = collocated_covariate(y, x, samples.spec.collocated_radius);
    let b0 = samples.pooled("beta0").expect("beta0");
    let b1 = samples.pooled("beta1").expect("beta1");
    let s2 = samples.pooled("sigma2").expect("sigma2");
    let picks = thinned(b0.len(), n_draws);
    let mut rng = rng::stream(seed, 0x5052_4544);
    Ok(rows
        .iter()
        .map(|r| Prediction {
            site_id: y.sites[r.site].site_id.clone(),
            coord: y.sites[r.site].coord,
            time: r.time,
            interval: r.covariate.map(|w| {
                Interval::from_draws(
                    picks
                        .iter()
                        .map(|&m| b0[m] + b1[m] * w + s2[m].sqrt() * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                )
            }),
        })
        .collect())
}
