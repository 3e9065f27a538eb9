//! Replicated simulation study: fit under the true window, under
//! misspecified windows, and under blocky covariate gaps; score held-out
//! sites.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{inject_missingness, missing_fraction, MissingPattern, Missingness, SimConfig, Simulator};
use crate::error::Result;
use crate::inference::{convergence, predict, run_chain, summarize, McmcConfig, ModelSpec, ParamSummary, Variant};
use crate::metrics::score;
use crate::predictor::build_index;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub label: String,
    pub radius: f64,
    pub lag: f64,
    pub missing: Option<Missingness>,
}

impl Scenario {
    pub fn window(label: &str, radius: f64, lag: f64) -> Self {
        Self {
            label: label.into(),
            radius,
            lag,
            missing: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub sim: SimConfig,
    pub replicates: usize,
    pub scenarios: Vec<Scenario>,
    pub mcmc: McmcConfig,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl StudyConfig {
    /// 20 replicates of the reduced design; the true window, a truncated
    /// and an enlarged one, and 30% blocky gaps under the true window.
    pub fn desk() -> Self {
        let sim = SimConfig::desk();
        let (r, q) = (sim.radius, sim.lag);
        Self {
            replicates: 20,
            scenarios: vec![
                Scenario::window("true", r, q),
                Scenario::window("truncated", 5.0, 2.0),
                Scenario::window("enlarged", 15.0, 8.0),
                Scenario {
                    label: "blocky30".into(),
                    radius: r,
                    lag: q,
                    missing: Some(Missingness::new(MissingPattern::Blocky, 0.3)),
                },
            ],
            sim,
            mcmc: McmcConfig::default(),
            variant: Variant::Baseline,
            seed: 2024,
        }
    }

    /// The 100-replicate design at full size.
    pub fn full() -> Self {
        let sim = SimConfig::default();
        Self {
            replicates: 100,
            sim,
            ..Self::desk()
        }
    }
}

/// One fit of one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub replicate: usize,
    pub scenario: String,
    pub radius: f64,
    pub lag: f64,
    pub missing_rate: f64,
    pub n_obs: usize,
    pub params: Vec<ParamSummary>,
    pub rmse: f64,
    pub r2: Option<f64>,
    pub coverage: f64,
    pub mean_width: f64,
    pub n_scored: usize,
    pub n_skipped: usize,
    pub max_rhat: f64,
    pub min_ess: f64,
    pub converged: bool,
}

impl StudyRow {
    pub fn param(&self, name: &str) -> Option<&ParamSummary> {
        self.params.iter().find(|p| p.name == name)
    }
}

fn run_replicate(cfg: &StudyConfig, sim: &Simulator, rep: usize) -> Result<Vec<StudyRow>> {
    let data = sim.replicate(rng::derive(cfg.seed, &[rep as u64]))?;
    let x_full = data.field.to_series();
    let y_fit = data.fit_response();
    let y_out = data.held_out_response();
    let truth: Vec<f64> = y_out.iter_present().map(|(_, _, v)| v).collect();
    let mut rows = Vec::with_capacity(cfg.scenarios.len());
    for (k, sc) in cfg.scenarios.iter().enumerate() {
        let x = match &sc.missing {
            Some(m) => inject_missingness(&x_full, m, rng::derive(cfg.seed, &[rep as u64, k as u64, 1]))?,
            None => x_full.clone(),
        };
        let mut spec = ModelSpec::simulation(cfg.variant, sc.radius, sc.lag);
        spec.min_neighbors = 1;
        let index = build_index(&y_fit, &x, spec.buffer_config())?;
        let mcmc = McmcConfig {
            seed: rng::derive(cfg.seed, &[rep as u64, k as u64, 2]),
            ..cfg.mcmc.clone()
        };
        let post = run_chain(&spec, &index, None, &mcmc)?;
        let params = summarize(&post);
        let target = build_index(&y_out, &x, spec.buffer_config())?;
        let preds = predict(&post, &target, None, mcmc.predict_draws, mcmc.seed)?;
        let intervals: Vec<_> = target
            .observations
            .iter()
            .zip(&preds)
            .filter(|(o, _)| o.response.is_some())
            .map(|(_, p)| p.interval)
            .collect();
        let report = score(&truth, &intervals)?;
        let conv = convergence(&post, &params);
        rows.push(StudyRow {
            replicate: rep,
            scenario: sc.label.clone(),
            radius: sc.radius,
            lag: sc.lag,
            missing_rate: missing_fraction(&x),
            n_obs: post.n_obs,
            params,
            rmse: report.rmse,
            r2: report.r2,
            coverage: report.coverage,
            mean_width: report.mean_width,
            n_scored: report.n_scored,
            n_skipped: report.n_skipped,
            max_rhat: conv.max_rhat,
            min_ess: conv.min_ess,
            converged: conv.converged,
        });
    }
    Ok(rows)
}

/// Runs every replicate (in parallel) and returns rows ordered by replicate
/// then scenario.
pub fn run_study(cfg: &StudyConfig) -> Result<Vec<StudyRow>> {
    cfg.mcmc.validate()?;
    let sim = Simulator::new(cfg.sim.clone())?;
    let per_rep = (0..cfg.replicates)
        .into_par_iter()
        .map(|rep| run_replicate(cfg, &sim, rep))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_rep.into_iter().flatten().collect())
}

/// Across-replicate medians for one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub scenario: String,
    pub n_fits: usize,
    pub median_beta1: f64,
    pub median_xi1: f64,
    pub median_sigma2: f64,
    pub median_coverage: f64,
    pub mean_coverage: f64,
    pub mean_width: f64,
    pub median_rmse: f64,
    pub converged: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    crate::inference::quantile(&v, 0.5)
}

pub fn summarize_study(rows: &[StudyRow]) -> Vec<ScenarioSummary> {
    let mut labels: Vec<&str> = Vec::new();
    for r in rows {
        if !labels.contains(&r.scenario.as_str()) {
            labels.push(&r.scenario);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let sel: Vec<&StudyRow> = rows.iter().filter(|r| r.scenario == label).collect();
            let med = |name: &str| median(sel.iter().filter_map(|r| r.param(name).map(|p| p.median)).collect());
            let n = sel.len() as f64;
            ScenarioSummary {
                scenario: label.to_string(),
                n_fits: sel.len(),
                median_beta1: med("beta1"),
                median_xi1: med("xi1"),
                median_sigma2: med("sigma2"),
                median_coverage: median(sel.iter().map(|r| r.coverage).collect()),
                mean_coverage: sel.iter().map(|r| r.coverage).sum::<f64>() / n,
                mean_width: sel.iter().map(|r| r.mean_width).sum::<f64>() / n,
                median_rmse: median(sel.iter().map(|r| r.rmse).collect()),
                converged: sel.iter().filter(|r| r.converged).count(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_study_runs_and_is_deterministic() {
        let mut cfg = StudyConfig::desk();
        cfg.sim.domain = super::super::Domain::square(34.0);
        cfg.sim.site_margin = 12.0;
        cfg.sim.n_sites = 5;
        cfg.sim.n_fit = 3;
        cfg.sim.n_times = 10;
        cfg.sim.gp_variance = 0.0;
        cfg.replicates = 2;
        cfg.scenarios.truncate(2);
        cfg.mcmc = McmcConfig {
            n_iter: 400,
            n_warmup: 200,
            n_chains: 2,
            predict_draws: 100,
            ..McmcConfig::default()
        };
        let a = run_study(&cfg).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a, run_study(&cfg).unwrap());
        let s = summarize_study(&a);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].scenario, "true");
        assert!(a.iter().all(|r| (0.0..=1.0).contains(&r.coverage)));
    }
}
