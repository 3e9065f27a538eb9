//! Separable exponential space-time kernels normalized over `B_r × [0, q]`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("kernel parameter {name} must be positive and finite, got {value}")]
    Domain { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    #[default]
    Exponential,
}

/// A normalized separable kernel `c1 exp(-h/xi_space) · c2 exp(-l/xi_time)`
/// supported on `h <= radius`, `0 <= l <= lag`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub radius: f64,
    pub lag: f64,
    pub xi_space: f64,
    pub xi_time: f64,
    pub c_space: f64,
    pub c_time: f64,
}

fn check(name: &'static str, value: f64) -> Result<(), KernelError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(KernelError::Domain { name, value })
    }
}

/// `1 - e^{-x}(1 + x)` without cancellation for small `x`.
fn disk_mass_factor(x: f64) -> f64 {
    if x < 1e-3 {
        // sum_{k>=2} (-1)^k (k-1) x^k / k!
        let mut term = x * x / 2.0;
        let mut sum = term;
        for k in 3..12 {
            term *= -x / k as f64;
            sum += term * (k - 1) as f64;
        }
        sum
    } else {
        -(-x).exp_m1() - x * (-x).exp()
    }
}

/// Normalizing constant of `exp(-h/xi)` over the disk of radius `r`.
pub fn spatial_norm_const(r: f64, xi: f64) -> f64 {
    let x = r / xi;
    if x < 1e-6 {
        // flat-kernel limit 1/(pi r^2), first-order correction
        return 1.0 / (PI * r * r * (1.0 - 2.0 * x / 3.0));
    }
    1.0 / (2.0 * PI * xi * xi * disk_mass_factor(x))
}

/// Normalizing constant of `exp(-l/xi)` over `[0, q]`.
pub fn temporal_norm_const(q: f64, xi: f64) -> f64 {
    1.0 / (-xi * (-q / xi).exp_m1())
}

/// `∫_a^b e^{-x/xi} dx` for `a <= b`.
pub fn exp_mass(a: f64, b: f64, xi: f64) -> f64 {
    xi * (-a / xi).exp() * -(-(b - a) / xi).exp_m1()
}

impl KernelSpec {
    pub fn normalize(r: f64, q: f64, xi_space: f64, xi_time: f64) -> Result<Self, KernelError> {
        check("r", r)?;
        check("q", q)?;
        check("xi1", xi_space)?;
        check("xi2", xi_time)?;
        Ok(Self {
            family: KernelFamily::Exponential,
            radius: r,
            lag: q,
            xi_space,
            xi_time,
            c_space: spatial_norm_const(r, xi_space),
            c_time: temporal_norm_const(q, xi_time),
        })
    }

    /// Same window, new scales.
    pub fn with_scales(&self, xi_space: f64, xi_time: f64) -> Result<Self, KernelError> {
        Self::normalize(self.radius, self.lag, xi_space, xi_time)
    }

    pub fn spatial(&self, h: f64) -> f64 {
        if h > self.radius {
            0.0
        } else {
            self.c_space * (-h / self.xi_space).exp()
        }
    }

    pub fn temporal(&self, l: f64) -> f64 {
        if l > self.lag {
            0.0
        } else {
            self.c_time * (-l / self.xi_time).exp()
        }
    }

    /// Kernel weight at spatial distance `h` and time lag `l`; zero outside
    /// the buffer.
    pub fn weight(&self, h: f64, l: f64) -> f64 {
        if h > self.radius || l > self.lag {
            return 0.0;
        }
        self.c_space * self.c_time * (-h / self.xi_space).exp() * (-l / self.xi_time).exp()
    }
}

/// `ω(h, l) = β1 κ(h, l)` on a grid; rows follow `hs`, columns follow `ls`.
pub fn omega_surface(beta1: f64, spec: &KernelSpec, hs: &[f64], ls: &[f64]) -> Vec<Vec<f64>> {
    hs.iter()
        .map(|&h| ls.iter().map(|&l| beta1 * spec.weight(h, l)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Composite Gauss–Legendre (5 nodes per panel) on [a, b].
    pub(crate) fn gauss_legendre(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
        const X: [f64; 5] = [
            0.0,
            -0.538_469_310_105_683_1,
            0.538_469_310_105_683_1,
            -0.906_179_845_938_664,
            0.906_179_845_938_664,
        ];
        const W: [f64; 5] = [
            0.568_888_888_888_888_9,
            0.478_628_670_499_366_5,
            0.478_628_670_499_366_5,
            0.236_926_885_056_189_1,
            0.236_926_885_056_189_1,
        ];
        let h = (b - a) / panels as f64;
        let mut s = 0.0;
        for p in 0..panels {
            let mid = a + (p as f64 + 0.5) * h;
            for (x, w) in X.iter().zip(&W) {
                s += w * f(mid + 0.5 * h * x);
            }
        }
        0.5 * h * s
    }

    #[test]
    fn reference_constants() {
        let k = KernelSpec::normalize(10.0, 5.0, 2.0, 0.5).unwrap();
        // published to seven decimals, truncated
        assert!((k.c_space - 0.041_465_0).abs() < 1e-7, "{}", k.c_space);
        assert!((k.c_time - 2.000_090_8).abs() < 5e-8, "{}", k.c_time);
        // independent quadrature of the radial and temporal integrals
        let disk = gauss_legendre(|h| 2.0 * PI * h * (-h / 2.0).exp(), 0.0, 10.0, 200);
        let line = gauss_legendre(|l| (-l / 0.5).exp(), 0.0, 5.0, 200);
        assert!((k.c_space * disk - 1.0).abs() < 1e-10);
        assert!((k.c_time * line - 1.0).abs() < 1e-10);
    }

    #[test]
    fn flat_limits() {
        let r: f64 = 10.0;
        let q = 5.0;
        let c1 = spatial_norm_const(r, 1e9);
        assert!((c1 * PI * r * r - 1.0).abs() < 1e-7);
        let c2 = temporal_norm_const(q, 1e9);
        assert!((c2 * q - 1.0).abs() < 1e-7);
        // the series branch agrees with the closed form where both are accurate
        let x = 2e-3;
        let closed = -(-x as f64).exp_m1() - x * (-x as f64).exp();
        assert!((disk_mass_factor(9.99e-4) / disk_mass_factor(1.001e-3) - 1.0).abs() < 1e-2);
        assert!((disk_mass_factor(x) - closed).abs() / closed < 1e-9);
    }

    #[test]
    fn weight_examples() {
        let k = KernelSpec::normalize(10.0, 5.0, 2.0, 0.5).unwrap();
        assert_eq!(k.weight(0.0, 0.0), k.c_space * k.c_time);
        assert_eq!(k.weight(10.1, 0.0), 0.0);
        assert_eq!(k.weight(0.0, 5.01), 0.0);
        let expected = k.c_space * k.c_time * (-1.0f64).exp() * (-2.0f64).exp();
        assert!((k.weight(2.0, 1.0) - expected).abs() < 1e-15);
    }

    #[test]
    fn domain_errors() {
        assert!(KernelSpec::normalize(0.0, 1.0, 1.0, 1.0).is_err());
        assert!(KernelSpec::normalize(1.0, -1.0, 1.0, 1.0).is_err());
        assert!(KernelSpec::normalize(1.0, 1.0, f64::NAN, 1.0).is_err());
        assert!(KernelSpec::normalize(1.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn omega_surface_examples() {
        let k = KernelSpec::normalize(10.0, 5.0, 2.0, 0.5).unwrap();
        let hs = [0.0, 1.0, 5.0, 11.0];
        let ls = [0.0, 0.5, 3.0];
        assert!(omega_surface(0.0, &k, &hs, &ls).iter().flatten().all(|&v| v == 0.0));
        let one = omega_surface(1.0, &k, &hs, &ls);
        assert_eq!(one[0][0], k.c_space * k.c_time);
        let two = omega_surface(2.0, &k, &hs, &ls);
        for (a, b) in one.iter().flatten().zip(two.iter().flatten()) {
            assert_eq!(2.0 * a, *b);
        }
        assert_eq!(one[3], vec![0.0; 3]);
    }

    proptest! {
        #[test]
        fn monotone_and_supported(xi1 in 0.1f64..50.0, xi2 in 0.05f64..20.0, h1 in 0.0f64..12.0, dh in 0.0f64..3.0, l in 0.0f64..6.0) {
            let k = KernelSpec::normalize(10.0, 5.0, xi1, xi2).unwrap();
            prop_assert!(k.weight(h1, l) >= k.weight(h1 + dh, l));
            prop_assert!(k.weight(l, h1 / 2.0) >= k.weight(l, h1 / 2.0 + dh));
            if h1 > 10.0 || l > 5.0 {
                prop_assert_eq!(k.weight(h1, l), 0.0);
            }
        }

        #[test]
        fn normalization_by_quadrature(r in 0.5f64..30.0, q in 0.5f64..10.0, xi1 in 0.2f64..40.0, xi2 in 0.1f64..20.0) {
            let k = KernelSpec::normalize(r, q, xi1, xi2).unwrap();
            let disk = gauss_legendre(|h| 2.0 * PI * h * k.spatial(h), 0.0, r, 400);
            let line = gauss_legendre(|l| k.temporal(l), 0.0, q, 400);
            prop_assert!((disk * line - 1.0).abs() < 1e-8);
        }
    }
}
