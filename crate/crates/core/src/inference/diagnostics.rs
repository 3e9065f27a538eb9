//! Gelman–Rubin `R̂` and multi-chain effective sample size.

use serde::{Deserialize, Serialize};

use super::predict::quantile;
use super::sampler::PosteriorSamples;

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

/// Classic potential scale reduction over equal-length chains. `NaN` when
/// every chain is constant.
pub fn gelman_rubin(chains: &[&[f64]]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if m < 2 || n < 2 {
        return f64::NAN;
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(&c[..n])).collect();
    let b = n as f64 * var(&means);
    let w = mean(&chains.iter().map(|c| var(&c[..n])).collect::<Vec<_>>());
    let nf = n as f64;
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    (var_plus / w).sqrt()
}

fn autocov_at(d: &[f64], k: usize) -> f64 {
    let n = d.len();
    d[..n - k].iter().zip(&d[k..]).map(|(a, b)| a * b).sum::<f64>() / n as f64
}

/// Multi-chain ESS with Geyer's initial monotone sequence estimator.
pub fn effective_sample_size(chains: &[&[f64]]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if m == 0 || n < 4 {
        return f64::NAN;
    }
    let centered: Vec<Vec<f64>> = chains
        .iter()
        .map(|c| {
            let mu = mean(&c[..n]);
            c[..n].iter().map(|v| v - mu).collect()
        })
        .collect();
    let nf = n as f64;
    let w = mean(&chains.iter().map(|c| var(&c[..n])).collect::<Vec<_>>());
    if !(w > 0.0) {
        return f64::NAN;
    }
    let b_over_n = if m > 1 {
        var(&chains.iter().map(|c| mean(&c[..n])).collect::<Vec<_>>())
    } else {
        0.0
    };
    let var_plus = (nf - 1.0) / nf * w + b_over_n;
    let rho = |t: usize| {
        let acov = centered.iter().map(|d| autocov_at(d, t)).sum::<f64>() / m as f64;
        1.0 - (w - acov) / var_plus
    };
    let mut tau = -1.0;
    let mut prev = f64::INFINITY;
    let mut t = 0;
    while t + 1 < n {
        let pair = rho(t) + rho(t + 1);
        if pair < 0.0 {
            break;
        }
        let pair = pair.min(prev);
        prev = pair;
        tau += 2.0 * pair;
        t += 2;
    }
    m as f64 * nf / tau.max(1e-3)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub median: f64,
    pub lo95: f64,
    pub hi95: f64,
    pub rhat: f64,
    pub ess: f64,
}

pub fn summarize(samples: &PosteriorSamples) -> Vec<ParamSummary> {
    samples
        .names
        .iter()
        .map(|name| {
            let chains = samples.chains_of(name).expect("known parameter");
            let mut pooled = samples.pooled(name).expect("known parameter");
            pooled.sort_by(f64::total_cmp);
            ParamSummary {
                name: name.clone(),
                mean: mean(&pooled),
                median: quantile(&pooled, 0.5),
                lo95: quantile(&pooled, 0.025),
                hi95: quantile(&pooled, 0.975),
                rhat: gelman_rubin(&chains),
                ess: effective_sample_size(&chains),
            }
        })
        .collect()
}

/// Convergence thresholds for the regression coefficients and `σ²`.
pub const RHAT_MAX: f64 = 1.1;
pub const ESS_MIN: f64 = 200.0;

/// Worst `R̂` and ESS over `β` and `σ²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub max_rhat: f64,
    pub min_ess: f64,
    pub converged: bool,
}

pub fn convergence(samples: &PosteriorSamples, params: &[ParamSummary]) -> Convergence {
    let betas = samples.layout.beta_names();
    let checked: Vec<&ParamSummary> = params
        .iter()
        .filter(|p| betas.contains(&p.name) || p.name == "sigma2")
        .collect();
    let max_rhat = checked.iter().map(|p| p.rhat).fold(f64::NEG_INFINITY, f64::max);
    let min_ess = checked.iter().map(|p| p.ess).fold(f64::INFINITY, f64::min);
    Convergence {
        max_rhat,
        min_ess,
        converged: max_rhat < RHAT_MAX && min_ess > ESS_MIN,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn identical_chains() {
        let c: Vec<f64> = (0..100).map(|k| (k as f64 * 0.37).sin()).collect();
        let r = gelman_rubin(&[&c, &c, &c]);
        assert!((r - (99.0f64 / 100.0).sqrt()).abs() < 1e-12);
        assert!(gelman_rubin(&[&[1.0, 1.0], &[1.0, 1.0]]).is_nan());
    }

    #[test]
    fn independent_draws_ess_near_n() {
        let n = 2000;
        let mut ratios = Vec::new();
        for seed in 0..20 {
            let mut r = rng::stream(seed, 0);
            let chains: Vec<Vec<f64>> = (0..4).map(|_| (0..n).map(|_| r.sample(StandardNormal)).collect()).collect();
            let refs: Vec<&[f64]> = chains.iter().map(|c| c.as_slice()).collect();
            ratios.push(effective_sample_size(&refs) / (4 * n) as f64);
            assert!(gelman_rubin(&refs) < 1.01);
        }
        let avg = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((avg - 1.0).abs() < 0.1, "{avg}");
    }

    #[test]
    fn ar1_ess() {
        let rho: f64 = 0.7;
        let n = 50_000;
        let mut r = rng::stream(4, 0);
        let mut x = 0.0;
        let c: Vec<f64> = (0..n)
            .map(|_| {
                x = rho * x + (1.0 - rho * rho).sqrt() * r.sample::<f64, _>(StandardNormal);
                x
            })
            .collect();
        let ess = effective_sample_size(&[&c]);
        let want = n as f64 * (1.0 - rho) / (1.0 + rho);
        assert!((ess / want - 1.0).abs() < 0.15, "{ess} vs {want}");
    }
}
