//! Clamped B-spline basis on a closed time interval.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    /// Equally spaced interior knots.
    pub n_knots: usize,
    pub degree: usize,
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self { n_knots: 10, degree: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSpline {
    pub start: f64,
    pub end: f64,
    pub degree: usize,
    knots: Vec<f64>,
}

impl BSpline {
    pub fn new(start: f64, end: f64, cfg: BasisConfig) -> Result<Self> {
        if !(end > start && start.is_finite() && end.is_finite()) {
            return Err(Error::config(format!("basis interval [{start}, {end}] is empty")));
        }
        let p = cfg.degree;
        let mut knots = vec![start; p + 1];
        for k in 1..=cfg.n_knots {
            knots.push(start + (end - start) * k as f64 / (cfg.n_knots + 1) as f64);
        }
        knots.extend(std::iter::repeat_n(end, p + 1));
        Ok(Self {
            start,
            end,
            degree: p,
            knots,
        })
    }

    pub fn len(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All basis values at `t` (Cox–de Boor).
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let tol = 1e-9 * (self.end - self.start);
        if !(t >= self.start - tol && t <= self.end + tol) {
            return Err(Error::data(format!(
                "time {t} lies outside the basis support [{}, {}]",
                self.start, self.end
            )));
        }
        let t = t.clamp(self.start, self.end);
        let p = self.degree;
        let kn = &self.knots;
        let n = self.len();
        // span index with t in [kn[span], kn[span + 1]); the right end uses the last span
        let span = if t >= self.end {
            n - 1
        } else {
            kn.partition_point(|&k| k <= t) - 1
        };
        let mut local = vec![0.0; p + 1];
        local[0] = 1.0;
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        for j in 1..=p {
            left[j] = t - kn[span + 1 - j];
            right[j] = kn[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == 0.0 { 0.0 } else { local[r] / denom };
                local[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            local[j] = saved;
        }
        let mut out = vec![0.0; n];
        for (r, v) in local.into_iter().enumerate() {
            out[span - p + r] = v;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dimensions_and_endpoints() {
        let b = BSpline::new(1.0, 61.0, BasisConfig::default()).unwrap();
        assert_eq!(b.len(), 14);
        let first = b.eval(1.0).unwrap();
        assert_eq!(first[0], 1.0);
        let last = b.eval(61.0).unwrap();
        assert_eq!(last[13], 1.0);
        assert!(b.eval(0.5).is_err());
        assert!(b.eval(61.5).is_err());
        assert!(BSpline::new(2.0, 2.0, BasisConfig::default()).is_err());
    }

    #[test]
    fn linear_degree_is_hat_functions() {
        let b = BSpline::new(0.0, 4.0, BasisConfig { n_knots: 3, degree: 1 }).unwrap();
        let v = b.eval(1.5).unwrap();
        assert_eq!(v.len(), 5);
        assert!((v[1] - 0.5).abs() < 1e-15 && (v[2] - 0.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn partition_of_unity(t in 0.0f64..1.0, k in 1usize..15, d in 0usize..5) {
            let b = BSpline::new(-3.0, 7.0, BasisConfig { n_knots: k, degree: d }).unwrap();
            let v = b.eval(-3.0 + 10.0 * t).unwrap();
            prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(v.iter().all(|&x| x >= -1e-15));
        }
    }
}
