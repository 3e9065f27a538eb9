//! Full conditional distributions of the conjugate blocks and the
//! log-scale Metropolis acceptance rule.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inverse-gamma with density proportional to `x^{-shape-1} exp(-scale/x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvGamma {
    pub shape: f64,
    pub scale: f64,
}

impl InvGamma {
    pub const fn new(shape: f64, scale: f64) -> Self {
        Self { shape, scale }
    }

    pub fn mean(&self) -> f64 {
        self.scale / (self.shape - 1.0)
    }

    pub fn variance(&self) -> f64 {
        let a = self.shape;
        self.scale * self.scale / ((a - 1.0) * (a - 1.0) * (a - 2.0))
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        -(self.shape + 1.0) * x.ln() - self.scale / x
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let g = Gamma::new(self.shape, 1.0 / self.scale).expect("positive inverse-gamma parameters");
        1.0 / g.sample(rng)
    }
}

/// Gamma in the shape-scale parametrization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub scale: f64,
}

impl GammaPrior {
    pub fn mean(&self) -> f64 {
        self.shape * self.scale
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        (self.shape - 1.0) * x.ln() - x / self.scale
    }
}

/// `σ² | ·` from the residual sum of squares of `n` observations.
pub fn sigma2_conditional(prior: InvGamma, rss: f64, n: usize) -> InvGamma {
    InvGamma::new(prior.shape + 0.5 * n as f64, prior.scale + 0.5 * rss)
}

/// `σ_b² | β` under `β ~ N(0, σ_b² I)`.
pub fn sigma_b2_conditional(prior: InvGamma, beta: &[f64]) -> InvGamma {
    let ss: f64 = beta.iter().map(|b| b * b).sum();
    InvGamma::new(prior.shape + 0.5 * beta.len() as f64, prior.scale + 0.5 * ss)
}

/// A multivariate normal held through the Cholesky factor of its precision.
#[derive(Debug, Clone)]
pub struct GaussianConditional {
    pub mean: DVector<f64>,
    precision_chol: DMatrix<f64>,
}

impl GaussianConditional {
    /// From precision `Q` and linear term `b`: mean `Q⁻¹ b`.
    pub fn from_precision(precision: DMatrix<f64>, linear: DVector<f64>) -> Result<Self> {
        let chol = precision
            .cholesky()
            .ok_or_else(|| Error::numerical("posterior precision is not positive definite"))?;
        let mean = chol.solve(&linear);
        Ok(Self {
            mean,
            precision_chol: chol.unpack(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let n = self.dim();
        let l = &self.precision_chol;
        let inv_l = l
            .clone()
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .expect("nonsingular Cholesky factor");
        inv_l.transpose() * inv_l
    }

    /// `mean + L⁻ᵀ z` with `Q = L Lᵀ`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let n = self.dim();
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = self
            .precision_chol
            .transpose()
            .solve_upper_triangular(&z)
            .expect("nonsingular Cholesky factor");
        &self.mean + x
    }
}

/// `β | ·` for `y ~ N(Xβ, σ² I)`, `β ~ N(0, σ_b² I)`, given `XᵀX` and `Xᵀy`.
/// An infinite `σ_b²` gives the flat-prior (least-squares) limit.
pub fn beta_conditional(xtx: &DMatrix<f64>, xty: &DVector<f64>, sigma2: f64, sigma_b2: f64) -> Result<GaussianConditional> {
    let p = xtx.nrows();
    let mut precision = xtx / sigma2;
    for k in 0..p {
        precision[(k, k)] += 1.0 / sigma_b2;
    }
    GaussianConditional::from_precision(precision, xty / sigma2)
}

/// Latent log spatial scales with their plume status, the data of the
/// hierarchical block.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleLevels<'a> {
    pub log_xi: &'a [f64],
    pub plume: &'a [bool],
}

/// `α | ·` for `log ξ_k ~ N(α0 + α1 I_k, σ_ν²)` with prior
/// `α ~ N(μ_α, σ_α² I)`. With `alpha0` given only `α1` is drawn and the
/// result is one-dimensional.
pub fn alpha_conditional(
    levels: &ScaleLevels<'_>,
    prior_mean: [f64; 2],
    prior_var: f64,
    sigma_nu2: f64,
    alpha0: Option<f64>,
) -> Result<GaussianConditional> {
    match alpha0 {
        None => {
            let mut q = DMatrix::identity(2, 2) / prior_var;
            let mut b = DVector::from_vec(vec![prior_mean[0] / prior_var, prior_mean[1] / prior_var]);
            for (&v, &i) in levels.log_xi.iter().zip(levels.plume) {
                let x = [1.0, if i { 1.0 } else { 0.0 }];
                for r in 0..2 {
                    for c in 0..2 {
                        q[(r, c)] += x[r] * x[c] / sigma_nu2;
                    }
                    b[r] += x[r] * v / sigma_nu2;
                }
            }
            GaussianConditional::from_precision(q, b)
        }
        Some(a0) => {
            let mut q = 1.0 / prior_var;
            let mut b = prior_mean[1] / prior_var;
            for (&v, &i) in levels.log_xi.iter().zip(levels.plume) {
                if i {
                    q += 1.0 / sigma_nu2;
                    b += (v - a0) / sigma_nu2;
                }
            }
            GaussianConditional::from_precision(DMatrix::from_element(1, 1, q), DVector::from_element(1, b))
        }
    }
}

/// `σ_ν² | ·` from the deviations of the latent levels around `α0 + α1 I`.
pub fn sigma_nu2_conditional(prior: InvGamma, levels: &ScaleLevels<'_>, alpha: [f64; 2]) -> InvGamma {
    let ss: f64 = levels
        .log_xi
        .iter()
        .zip(levels.plume)
        .map(|(&v, &i)| {
            let d = v - alpha[0] - if i { alpha[1] } else { 0.0 };
            d * d
        })
        .sum();
    InvGamma::new(prior.shape + 0.5 * levels.log_xi.len() as f64, prior.scale + 0.5 * ss)
}

/// Log acceptance ratio of a log-scale random-walk move from `xi` to
/// `xi_new`: target ratio times the Jacobian `ξ'/ξ`.
pub fn log_scale_log_ratio(log_target_new: f64, log_target_old: f64, xi_new: f64, xi_old: f64) -> f64 {
    if !log_target_new.is_finite() {
        return f64::NEG_INFINITY;
    }
    (log_target_new - log_target_old) + (xi_new.ln() - xi_old.ln())
}

pub fn acceptance_probability(log_ratio: f64) -> f64 {
    if log_ratio >= 0.0 {
        1.0
    } else if log_ratio.is_nan() {
        0.0
    } else {
        log_ratio.exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Mean and variance of a density known up to a constant on a grid.
    fn grid_moments(ln_f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> (f64, f64) {
        let h = (hi - lo) / n as f64;
        let xs: Vec<f64> = (0..n).map(|k| lo + (k as f64 + 0.5) * h).collect();
        let lf: Vec<f64> = xs.iter().map(|&x| ln_f(x)).collect();
        let m = lf.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = lf.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = w.iter().sum();
        let mean = xs.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() / z;
        let var = xs.iter().zip(&w).map(|(x, w)| (x - mean).powi(2) * w).sum::<f64>() / z;
        (mean, var)
    }

    #[test]
    fn sigma2_example_parameters() {
        let rss = [0.1f64, -0.1, 0.2, -0.2].iter().map(|r| r * r).sum::<f64>();
        let ig = sigma2_conditional(InvGamma::new(0.001, 0.001), rss, 4);
        assert!((ig.shape - 2.001).abs() < 1e-12);
        assert!((ig.scale - 0.051).abs() < 1e-12);
        assert_eq!(sigma2_conditional(InvGamma::new(0.5, 0.2), 0.0, 6), InvGamma::new(3.5, 0.2));
    }

    #[test]
    fn sigma2_matches_grid_oracle() {
        // prior × Gaussian likelihood, written out directly
        let resid = [0.3, -0.5, 0.8, 0.1, -0.4];
        let rss: f64 = resid.iter().map(|r| r * r).sum();
        let prior = InvGamma::new(3.0, 1.0);
        let ln_f = |s2: f64| prior.ln_pdf(s2) + resid.iter().map(|r| -0.5 * s2.ln() - r * r / (2.0 * s2)).sum::<f64>();
        let (m, v) = grid_moments(ln_f, 1e-4, 20.0, 400_000);
        let ig = sigma2_conditional(prior, rss, 5);
        assert!((ig.mean() - m).abs() < 1e-2 * m);
        assert!((ig.variance() - v).abs() < 1e-2 * v);
    }

    #[test]
    fn inverse_gamma_sampling_moments() {
        let ig = InvGamma::new(6.0, 2.5);
        let mut r = rng::stream(3, 0);
        let n = 100_000;
        let mean = (0..n).map(|_| ig.sample(&mut r)).sum::<f64>() / n as f64;
        assert!((mean - ig.mean()).abs() < 0.01 * ig.mean());
    }

    #[test]
    fn sigma_b2_cases() {
        let prior = InvGamma::new(0.001, 0.001);
        assert_eq!(sigma_b2_conditional(prior, &[0.0, 0.0]), InvGamma::new(1.001, 0.001));
        let ig = sigma_b2_conditional(prior, &[1.0, -2.0, 0.5]);
        assert!((ig.shape - 1.501).abs() < 1e-12 && (ig.scale - (0.001 + 2.625)).abs() < 1e-12);
    }

    #[test]
    fn beta_prior_when_no_data() {
        let c = beta_conditional(&DMatrix::zeros(2, 2), &DVector::zeros(2), 1.0, 4.0).unwrap();
        assert_eq!(c.mean, DVector::zeros(2));
        let cov = c.covariance();
        assert!((cov[(0, 0)] - 4.0).abs() < 1e-12 && cov[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn beta_flat_limit_is_least_squares() {
        let x = DMatrix::from_row_slice(5, 2, &[1.0, 0.3, 1.0, 1.1, 1.0, 2.0, 1.0, 2.9, 1.0, 4.2]);
        let y = DVector::from_vec(vec![1.2, 2.9, 4.8, 6.1, 9.0]);
        let c = beta_conditional(&(x.transpose() * &x), &(x.transpose() * &y), 0.7, f64::INFINITY).unwrap();
        // normal equations by hand
        let (n, sx, sxx) = (5.0, 10.5, 0.09 + 1.21 + 4.0 + 8.41 + 17.64);
        let (sy, sxy) = (24.0, 0.36 + 3.19 + 9.6 + 17.69 + 37.8);
        let det = n * sxx - sx * sx;
        let b1 = (n * sxy - sx * sy) / det;
        let b0 = (sy - b1 * sx) / n;
        assert!((c.mean[0] - b0).abs() < 1e-8 && (c.mean[1] - b1).abs() < 1e-8);
    }

    #[test]
    fn beta_one_dimensional_grid() {
        let w = [0.5, 1.5, 2.0, 0.7, 1.1];
        let y = [2.0, 3.9, 5.2, 2.2, 3.0];
        let (s2, sb2) = (0.3, 2.0);
        let xtx = DMatrix::from_element(1, 1, w.iter().map(|v| v * v).sum::<f64>());
        let xty = DVector::from_element(1, w.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>());
        let c = beta_conditional(&xtx, &xty, s2, sb2).unwrap();
        let ln_f = |b: f64| -b * b / (2.0 * sb2) - w.iter().zip(&y).map(|(a, v)| (v - a * b).powi(2)).sum::<f64>() / (2.0 * s2);
        let (m, v) = grid_moments(ln_f, -5.0, 10.0, 10_000);
        assert!((c.mean[0] - m).abs() < 1e-3 * m.abs());
        assert!((c.covariance()[(0, 0)] - v).abs() < 1e-3 * v);
    }

    #[test]
    fn gaussian_sampling_moments() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let c = GaussianConditional::from_precision(q, DVector::from_vec(vec![1.0, -0.5])).unwrap();
        let cov = c.covariance();
        let mut r = rng::stream(1, 0);
        let n = 100_000;
        let draws: Vec<DVector<f64>> = (0..n).map(|_| c.sample(&mut r)).collect();
        let m0 = draws.iter().map(|d| d[0]).sum::<f64>() / n as f64;
        let v1 = draws.iter().map(|d| (d[1] - c.mean[1]).powi(2)).sum::<f64>() / n as f64;
        assert!((m0 - c.mean[0]).abs() < 0.01);
        assert!((v1 - cov[(1, 1)]).abs() < 0.02 * cov[(1, 1)]);
    }

    #[test]
    fn alpha_edge_cases() {
        let empty = ScaleLevels { log_xi: &[], plume: &[] };
        let c = alpha_conditional(&empty, [0.7, -0.2], 1.5, 0.3, None).unwrap();
        assert!((c.mean[0] - 0.7).abs() < 1e-14 && (c.mean[1] + 0.2).abs() < 1e-14);
        assert!((c.covariance()[(1, 1)] - 1.5).abs() < 1e-12);
        let lv = ScaleLevels { log_xi: &[0.4, 1.2], plume: &[false, true] };
        let wide = alpha_conditional(&lv, [0.7, -0.2], 1.5, 1e300, None).unwrap();
        assert!((wide.mean[1] + 0.2).abs() < 1e-9);
        let fixed = alpha_conditional(&lv, [0.7, -0.2], 1.5, 0.5, Some(0.4)).unwrap();
        assert_eq!(fixed.dim(), 1);
        // 1/1.5 + 1/0.5 precision, (−0.2/1.5 + 0.8/0.5) linear term
        let q = 1.0 / 1.5 + 2.0;
        assert!((fixed.mean[0] - (-0.2 / 1.5 + 1.6) / q).abs() < 1e-12);
    }

    #[test]
    fn sigma_nu2_example() {
        let lv = ScaleLevels { log_xi: &[0.5, 1.0], plume: &[false, true] };
        let ig = sigma_nu2_conditional(InvGamma::new(3.0, 0.5), &lv, [0.5, 0.3]);
        assert!((ig.shape - 4.0).abs() < 1e-15);
        assert!((ig.scale - (0.5 + 0.5 * 0.04)).abs() < 1e-15);
    }

    #[test]
    fn acceptance_examples() {
        // equal densities: ratio reduces to the Jacobian 2.2 / 2
        let lr = log_scale_log_ratio(-3.0, -3.0, 2.2, 2.0);
        assert_eq!(acceptance_probability(lr), 1.0);
        let half = log_scale_log_ratio(-3.0 + 0.5f64.ln(), -3.0, 2.0, 2.0);
        assert!((acceptance_probability(half) - 0.5).abs() < 1e-15);
        assert_eq!(acceptance_probability(log_scale_log_ratio(f64::NAN, 0.0, 1.0, 1.0)), 0.0);
        assert_eq!(acceptance_probability(log_scale_log_ratio(f64::INFINITY, 0.0, 1.0, 1.0)), 0.0);
    }
}
