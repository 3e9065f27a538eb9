//! Posterior predictive medians and 95% intervals.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::sampler::PosteriorSamples;
use super::{TimeScale, Variant};
use crate::data::Point;
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::predictor::{slices_for, BufferIndex, PredictorEngine};
use crate::rng;

/// Sample quantile of sorted data, linear interpolation between order
/// statistics (type 7).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of no data");
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub median: f64,
    pub lo95: f64,
    pub hi95: f64,
}

impl Interval {
    pub fn from_draws(mut draws: Vec<f64>) -> Self {
        draws.sort_by(f64::total_cmp);
        Self {
            median: quantile(&draws, 0.5),
            lo95: quantile(&draws, 0.025),
            hi95: quantile(&draws, 0.975),
        }
    }

    pub fn width(&self) -> f64 {
        self.hi95 - self.lo95
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo95 <= v && v <= self.hi95
    }
}

/// One prediction target; `interval` is `None` for a flagged buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub site_id: String,
    pub coord: Point,
    pub time: f64,
    pub interval: Option<Interval>,
}

/// Evenly spaced positions into the pooled draws.
pub(crate) fn thinned(total: usize, n: usize) -> Vec<usize> {
    let n = n.min(total);
    (0..n).map(|k| k * total / n).collect()
}

/// Predictive draws `β0 + β1 W(ξ) + ε` at every observation of `index`,
/// summarized by median and central 95% interval. `plume` is shaped like
/// the series the index was built from.
pub fn predict(
    samples: &PosteriorSamples,
    index: &BufferIndex,
    plume: Option<&[Vec<bool>]>,
    n_draws: usize,
    seed: u64,
) -> Result<Vec<Prediction>> {
    let spec = &samples.spec;
    if spec.variant == Variant::Collocated {
        return Err(Error::config("use predict_collocated for the collocated model"));
    }
    let c = &index.config;
    if c.radius != spec.radius || c.lag != spec.lag {
        return Err(Error::config(format!(
            "prediction buffers ({}, {}) differ from the fitted window ({}, {})",
            c.radius, c.lag, spec.radius, spec.lag
        )));
    }
    let layout = &samples.layout;
    let full = spec.variant == Variant::Full;
    let targets: Vec<usize> = (0..index.observations.len()).filter(|&k| index.observations[k].valid).collect();
    let flag = |k: usize| {
        let o = &index.observations[k];
        plume.is_some_and(|p| p[o.site][o.time_index])
    };
    let group_of = |k: usize| usize::from(full && flag(k));
    let fixed_rows: Vec<Vec<f64>> = targets
        .iter()
        .map(|&k| layout.fixed_row(index.observations[k].time, flag(k)))
        .collect::<Result<_>>()?;
    let slopes: Vec<Vec<f64>> = targets.iter().map(|&k| layout.slope_row(flag(k))).collect();
    let n_groups = if full { 2 } else { 1 };
    let group_slices: Vec<Vec<u32>> = (0..n_groups)
        .map(|g| slices_for(index, targets.iter().copied().filter(|&k| group_of(k) == g)))
        .collect();

    let total: usize = samples.chains.iter().map(|c| c.draws[0].len()).sum();
    let picks = thinned(total, n_draws);
    let col = |name: &str| samples.pooled(name);
    let pooled: Vec<Vec<f64>> = samples.names.iter().map(|n| col(n).expect("known")).collect();
    let nb = layout.n_beta();
    let sigma2 = samples.param("sigma2").expect("sigma2 recorded");
    let xi1 = samples.param(samples.spatial_scale_name()).expect("spatial scale recorded");
    let xi2 = samples.param("xi2");
    let xi2_fixed = match spec.priors.xi_time {
        TimeScale::Fixed(v) => Some(v),
        TimeScale::InvGamma { .. } => None,
    };
    let off = spec.plume_off_xi();

    let mut engines: Vec<PredictorEngine<'_>> = (0..n_groups).map(|_| PredictorEngine::new(index, spec.mode)).collect();
    let mut rng = rng::stream(seed, 0x5052_4544);
    let mut draws: Vec<Vec<f64>> = vec![Vec::with_capacity(picks.len()); targets.len()];
    for &m in &picks {
        let beta: Vec<f64> = (0..nb).map(|j| pooled[j][m]).collect();
        let sd = pooled[sigma2][m].sqrt();
        let t_scale = xi2.map_or_else(|| xi2_fixed.expect("fixed xi2"), |j| pooled[j][m]);
        let kernels: Vec<KernelSpec> = (0..n_groups)
            .map(|g| {
                let s = if full && g == 0 { off } else { pooled[xi1][m] };
                engines[g].update_space(&group_slices[g], s);
                KernelSpec::normalize(spec.radius, spec.lag, s, t_scale)
            })
            .collect::<std::result::Result<_, _>>()?;
        for (j, &k) in targets.iter().enumerate() {
            let g = group_of(k);
            let w = engines[g].value(k, &kernels[g]);
            let fixed: f64 = fixed_rows[j].iter().zip(&beta).map(|(a, b)| a * b).sum();
            let slope: f64 = slopes[j].iter().zip(&beta[layout.n_fixed()..]).map(|(a, b)| a * b).sum();
            let eps: f64 = rng.sample(StandardNormal);
            draws[j].push(fixed + slope * w + sd * eps);
        }
    }
    let mut by_target = draws.into_iter();
    Ok(index
        .observations
        .iter()
        .map(|o| Prediction {
            site_id: index.site_ids[o.site].clone(),
            coord: index.neighborhoods[o.site].center,
            time: o.time,
            interval: o.valid.then(|| Interval::from_draws(by_target.next().expect("one draw set per target"))),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn type7_quantiles() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&x, 0.5), 3.0);
        assert_eq!(quantile(&x, 0.0), 1.0);
        assert_eq!(quantile(&x, 1.0), 5.0);
        assert!((quantile(&x, 0.1) - 1.4).abs() < 1e-12);
        assert_eq!(quantile(&[7.0], 0.3), 7.0);
    }

    #[test]
    fn interval_from_constant_draws_collapses() {
        let i = Interval::from_draws(vec![2.5; 100]);
        assert_eq!((i.lo95, i.median, i.hi95), (2.5, 2.5, 2.5));
        assert_eq!(i.width(), 0.0);
    }

    #[test]
    fn thinning_is_even() {
        assert_eq!(thinned(10, 5), vec![0, 2, 4, 6, 8]);
        assert_eq!(thinned(3, 5), vec![0, 1, 2]);
    }
}
