//! Bayesian regression on the kernel-weighted predictor.
//!
//! Four nested models share one sampler:
//!
//! | variant               | intercept              | slope             | ξ1            |
//! |-----------------------|------------------------|-------------------|---------------|
//! | baseline              | `β0`                   | `β1`              | sampled       |
//! | functional mean       | `Σ b_k f_k(t)`         | `β1`              | sampled       |
//! | varying coefficient   | `Σ b_k f_k(t) + γ I`   | `β10 + β11 I`     | sampled       |
//! | full                  | `Σ b_k f_k(t) + γ I`   | `β10 + β11 I`     | by plume flag |
//!
//! plus a collocated benchmark that regresses on same-day covariate averages.

mod basis;
mod collocated;
mod conditionals;
mod diagnostics;
mod predict;
mod sampler;

pub use basis::{BSpline, BasisConfig};
pub use collocated::{collocated_covariate, fit_collocated, predict_collocated, CollocatedFit, CollocatedRow};
pub use conditionals::{
    acceptance_probability, alpha_conditional, beta_conditional, log_scale_log_ratio, sigma2_conditional,
    sigma_b2_conditional, sigma_nu2_conditional, GammaPrior, GaussianConditional, InvGamma, ScaleLevels,
};
pub use diagnostics::{convergence, effective_sample_size, gelman_rubin, summarize, Convergence, ParamSummary, ESS_MIN, RHAT_MAX};
pub use predict::{predict, quantile, Interval, Prediction};
pub use sampler::{log_scale_walk, run_chain, ChainDraws, ChainState, PosteriorSamples, Sampler, ScaleBlock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::{BufferIndex, PredictorMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    FunctionalMean,
    VaryingCoefficient,
    Full,
    Collocated,
}

impl Variant {
    pub fn uses_basis(self) -> bool {
        matches!(self, Variant::FunctionalMean | Variant::VaryingCoefficient | Variant::Full)
    }

    pub fn uses_indicator(self) -> bool {
        matches!(self, Variant::VaryingCoefficient | Variant::Full)
    }
}

/// Prior on the temporal scale, or a fixed value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeScale {
    InvGamma { shape: f64, scale: f64 },
    Fixed(f64),
}

impl TimeScale {
    pub fn fixed(self) -> Option<f64> {
        match self {
            TimeScale::Fixed(v) => Some(v),
            TimeScale::InvGamma { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Priors {
    pub sigma2: InvGamma,
    pub sigma_b2: InvGamma,
    pub xi_space: GammaPrior,
    pub xi_time: TimeScale,
    /// Spatial scale of non-plume observations in the full model; defaults
    /// to `2 · 10 / r`.
    pub plume_off_xi: Option<f64>,
    /// Prior mean of `(α0, α1)`; defaults to `(log ξ_{1,I=0}, 0)`.
    pub alpha_mean: Option<[f64; 2]>,
    pub alpha_var: f64,
    pub sigma_nu2: InvGamma,
    /// Sample `α0` as well instead of pinning it at `log ξ_{1,I=0}`.
    pub sample_alpha0: bool,
}

impl Default for Priors {
    fn default() -> Self {
        Self {
            sigma2: InvGamma::new(0.001, 0.001),
            sigma_b2: InvGamma::new(0.001, 0.001),
            xi_space: GammaPrior { shape: 1.0, scale: 9.0 },
            xi_time: TimeScale::InvGamma { shape: 2.0, scale: 1.0 },
            plume_off_xi: None,
            alpha_mean: None,
            alpha_var: 1.0,
            sigma_nu2: InvGamma::new(3.0, 0.5),
            sample_alpha0: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub variant: Variant,
    pub radius: f64,
    pub lag: f64,
    pub min_neighbors: usize,
    pub basis: BasisConfig,
    pub priors: Priors,
    pub mode: PredictorMode,
    pub collocated_radius: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            variant: Variant::Baseline,
            radius: 10.0,
            lag: 5.0,
            min_neighbors: 1,
            basis: BasisConfig::default(),
            priors: Priors::default(),
            mode: PredictorMode::Raw,
            collocated_radius: 5.0,
        }
    }
}

impl ModelSpec {
    pub fn new(variant: Variant, radius: f64, lag: f64) -> Self {
        Self {
            variant,
            radius,
            lag,
            ..Self::default()
        }
    }

    /// Simulation-study priors: `ξ1 ~ Gamma(2, 1)`.
    pub fn simulation(variant: Variant, radius: f64, lag: f64) -> Self {
        let mut spec = Self::new(variant, radius, lag);
        spec.priors.xi_space = GammaPrior { shape: 2.0, scale: 1.0 };
        spec
    }

    pub fn plume_off_xi(&self) -> f64 {
        self.priors.plume_off_xi.unwrap_or(2.0 * 10.0 / self.radius)
    }

    pub fn alpha_mean(&self) -> [f64; 2] {
        self.priors.alpha_mean.unwrap_or([self.plume_off_xi().ln(), 0.0])
    }

    pub fn buffer_config(&self) -> crate::predictor::BufferConfig {
        crate::predictor::BufferConfig {
            radius: self.radius,
            lag: self.lag,
            min_neighbors: self.min_neighbors,
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
        positive("radius", self.radius)?;
        positive("lag", self.lag)?;
        positive("collocated_radius", self.collocated_radius)?;
        let p = &self.priors;
        for (name, ig) in [("sigma2", p.sigma2), ("sigma_b2", p.sigma_b2), ("sigma_nu2", p.sigma_nu2)] {
            positive(&format!("{name} prior shape"), ig.shape)?;
            positive(&format!("{name} prior scale"), ig.scale)?;
        }
        positive("xi_space prior shape", p.xi_space.shape)?;
        positive("xi_space prior scale", p.xi_space.scale)?;
        match p.xi_time {
            TimeScale::InvGamma { shape, scale } => {
                positive("xi_time prior shape", shape)?;
                positive("xi_time prior scale", scale)?;
            }
            TimeScale::Fixed(v) => positive("fixed xi_time", v)?,
        }
        positive("alpha_var", p.alpha_var)?;
        positive("plume_off_xi", self.plume_off_xi())?;
        if matches!(self.variant, Variant::VaryingCoefficient | Variant::Full) && p.xi_time.fixed().is_none() {
            return Err(Error::config(format!(
                "the {:?} model needs a fixed xi_time",
                self.variant
            )));
        }
        if self.variant.uses_basis() && self.basis.n_knots < 2 {
            return Err(Error::config("the basis needs at least two knots"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    pub n_iter: usize,
    pub n_warmup: usize,
    pub n_chains: usize,
    pub seed: u64,
    /// Initial random-walk sd on the log scale.
    pub initial_step: f64,
    pub adapt_every: usize,
    pub target_acceptance: [f64; 2],
    /// Posterior draws used for prediction, evenly thinned.
    pub predict_draws: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            n_iter: 25_000,
            n_warmup: 12_500,
            n_chains: 4,
            seed: 1,
            initial_step: 0.3,
            adapt_every: 50,
            target_acceptance: [0.30, 0.45],
            predict_draws: 1000,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_warmup >= self.n_iter {
            return Err(Error::config(format!(
                "n_warmup ({}) must be below n_iter ({})",
                self.n_warmup, self.n_iter
            )));
        }
        if self.n_chains == 0 || self.adapt_every == 0 || self.predict_draws == 0 {
            return Err(Error::config("n_chains, adapt_every and predict_draws must be positive"));
        }
        if !(self.initial_step > 0.0 && self.initial_step.is_finite()) {
            return Err(Error::config("initial_step must be positive"));
        }
        let [lo, hi] = self.target_acceptance;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::config("target_acceptance must satisfy 0 < lo < hi < 1"));
        }
        Ok(())
    }

    pub fn n_kept(&self) -> usize {
        self.n_iter - self.n_warmup
    }
}

/// Where each coefficient sits in the β vector and how a row multiplies it.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub variant: Variant,
    pub basis: Option<BSpline>,
}

impl Layout {
    pub fn new(variant: Variant, basis: Option<BSpline>) -> Result<Self> {
        if variant.uses_basis() != basis.is_some() {
            return Err(Error::config(format!("{variant:?}: basis presence does not match the variant")));
        }
        Ok(Self { variant, basis })
    }

    /// Build the layout for `spec` over the response time range.
    pub fn for_model(spec: &ModelSpec, t_start: f64, t_end: f64) -> Result<Self> {
        let basis = if spec.variant.uses_basis() {
            Some(BSpline::new(t_start, t_end, spec.basis)?)
        } else {
            None
        };
        Self::new(spec.variant, basis)
    }

    /// Columns that do not involve `W`.
    pub fn n_fixed(&self) -> usize {
        match &self.basis {
            None => 1,
            Some(b) => b.len() + usize::from(self.variant.uses_indicator()),
        }
    }

    /// Columns that multiply `W`.
    pub fn n_slope(&self) -> usize {
        if self.variant.uses_indicator() {
            2
        } else {
            1
        }
    }

    pub fn n_beta(&self) -> usize {
        self.n_fixed() + self.n_slope()
    }

    pub fn beta_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.n_beta());
        match &self.basis {
            None => names.push("beta0".to_string()),
            Some(b) => {
                names.extend((1..=b.len()).map(|k| format!("b0_{k}")));
                if self.variant.uses_indicator() {
                    names.push("gamma".into());
                }
            }
        }
        if self.variant.uses_indicator() {
            names.push("beta10".into());
            names.push("beta11".into());
        } else {
            names.push("beta1".into());
        }
        names
    }

    /// Fixed part of a design row.
    pub fn fixed_row(&self, t: f64, plume: bool) -> Result<Vec<f64>> {
        match &self.basis {
            None => Ok(vec![1.0]),
            Some(b) => {
                let mut row = b.eval(t)?;
                if self.variant.uses_indicator() {
                    row.push(if plume { 1.0 } else { 0.0 });
                }
                Ok(row)
            }
        }
    }

    /// Multipliers of `W` in the slope columns.
    pub fn slope_row(&self, plume: bool) -> Vec<f64> {
        if self.variant.uses_indicator() {
            vec![1.0, if plume { 1.0 } else { 0.0 }]
        } else {
            vec![1.0]
        }
    }

    /// Full design row for a given `W`.
    pub fn design_row(&self, t: f64, plume: bool, w: f64) -> Result<Vec<f64>> {
        let mut row = self.fixed_row(t, plume)?;
        row.extend(self.slope_row(plume).into_iter().map(|m| m * w));
        Ok(row)
    }
}

/// Observations entering the likelihood: indexed, valid and with a response.
#[derive(Debug, Clone, PartialEq)]
pub struct FitRows {
    pub obs: Vec<usize>,
    pub y: Vec<f64>,
    pub time: Vec<f64>,
    pub plume: Vec<bool>,
}

impl FitRows {
    /// Valid observations with a response. `plume[site][time_index]` gives
    /// the indicator, shaped like the response series.
    pub fn from_index(index: &BufferIndex, plume: Option<&[Vec<bool>]>) -> Self {
        let mut rows = FitRows {
            obs: Vec::new(),
            y: Vec::new(),
            time: Vec::new(),
            plume: Vec::new(),
        };
        for (k, o) in index.observations.iter().enumerate() {
            let Some(v) = o.response else { continue };
            if !o.valid {
                continue;
            }
            rows.obs.push(k);
            rows.y.push(v);
            rows.time.push(o.time);
            rows.plume.push(plume.is_some_and(|p| p[o.site][o.time_index]));
        }
        rows
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn time_range(&self) -> Option<(f64, f64)> {
        let lo = self.time.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.time.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo <= hi).then_some((lo, hi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_row() {
        let l = Layout::new(Variant::Baseline, None).unwrap();
        assert_eq!(l.design_row(17.0, true, 3.5).unwrap(), vec![1.0, 3.5]);
        assert_eq!(l.beta_names(), ["beta0", "beta1"]);
    }

    #[test]
    fn varying_coefficient_rows() {
        let b = BSpline::new(0.0, 30.0, BasisConfig::default()).unwrap();
        let l = Layout::new(Variant::VaryingCoefficient, Some(b)).unwrap();
        let off = l.design_row(10.0, false, 2.0).unwrap();
        let on = l.design_row(10.0, true, 2.0).unwrap();
        assert_eq!(off.len(), 14 + 1 + 2);
        assert_eq!(&off[14..], &[0.0, 2.0, 0.0]);
        assert_eq!(&on[14..], &[1.0, 2.0, 2.0]);
        let s: f64 = off[..14].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(l.design_row(31.0, false, 1.0).is_err());
    }

    #[test]
    fn functional_mean_has_no_indicator() {
        let b = BSpline::new(0.0, 30.0, BasisConfig::default()).unwrap();
        let l = Layout::new(Variant::FunctionalMean, Some(b)).unwrap();
        assert_eq!(l.design_row(5.0, true, 1.0).unwrap(), l.design_row(5.0, false, 1.0).unwrap());
        assert_eq!(l.n_beta(), 15);
    }

    #[test]
    fn fixed_time_scale_required() {
        let mut s = ModelSpec::new(Variant::Full, 10.0, 5.0);
        assert!(s.validate().is_err());
        s.priors.xi_time = TimeScale::Fixed(0.5);
        s.validate().unwrap();
        assert!((s.plume_off_xi() - 2.0).abs() < 1e-15);
        assert!((ModelSpec::new(Variant::Full, 20.0, 5.0).plume_off_xi() - 1.0).abs() < 1e-15);
        let mut bad = ModelSpec::default();
        bad.priors.sigma2.shape = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mcmc_defaults() {
        let c = McmcConfig::default();
        c.validate().unwrap();
        assert_eq!((c.n_iter, c.n_warmup, c.n_kept()), (25_000, 12_500, 12_500));
        let bad = McmcConfig { n_warmup: 30_000, ..c };
        assert!(bad.validate().is_err());
    }
}
