//! Scattered spatio-temporal observations.
//!
//! Both the response and the covariate process are stored as an [`StSeries`]:
//! a set of sites at planar coordinates (km), each with its own strictly
//! increasing time stamps (days) and a value that may be missing.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A planar location in kilometres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn dist2(&self, other: &Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

/// A covariate process defined at every point of space and time.
pub trait CovariateField: Sync {
    fn value(&self, p: Point, t: f64) -> f64;
}

impl<F> CovariateField for F
where
    F: Fn(Point, f64) -> f64 + Sync,
{
    fn value(&self, p: Point, t: f64) -> f64 {
        self(p, t)
    }
}

/// One site's time series. `values[k]` is `None` when the observation at
/// `times[k]` is missing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSeries {
    pub site_id: String,
    pub coord: Point,
    pub times: Vec<f64>,
    pub values: Vec<Option<f64>>,
}

impl SiteSeries {
    pub fn new(site_id: impl Into<String>, coord: Point) -> Self {
        Self {
            site_id: site_id.into(),
            coord,
            times: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, t: f64, value: Option<f64>) {
        self.times.push(t);
        self.values.push(value);
    }

    pub fn present(&self, k: usize) -> bool {
        self.values[k].is_some()
    }

    pub fn n_present(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }
}

/// A scattered spatio-temporal dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StSeries {
    pub sites: Vec<SiteSeries>,
}

impl StSeries {
    pub fn new(sites: Vec<SiteSeries>) -> Self {
        Self { sites }
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    /// Total number of (site, time) entries, present or not.
    pub fn n_entries(&self) -> usize {
        self.sites.iter().map(|s| s.times.len()).sum()
    }

    pub fn n_present(&self) -> usize {
        self.sites.iter().map(SiteSeries::n_present).sum()
    }

    pub fn site_index(&self, site_id: &str) -> Option<usize> {
        self.sites.iter().position(|s| s.site_id == site_id)
    }

    /// Iterate over present entries as `(site index, time, value)`.
    pub fn iter_present(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        self.sites.iter().enumerate().flat_map(|(m, s)| {
            s.times
                .iter()
                .zip(&s.values)
                .filter_map(move |(&t, v)| v.map(|v| (m, t, v)))
        })
    }

    /// Keep only the sites for which `keep` returns true.
    pub fn filter_sites(&self, mut keep: impl FnMut(usize, &SiteSeries) -> bool) -> StSeries {
        StSeries {
            sites: self
                .sites
                .iter()
                .enumerate()
                .filter(|(m, s)| keep(*m, s))
                .map(|(_, s)| s.clone())
                .collect(),
        }
    }

    /// Checks every structural invariant and returns the list of violations.
    pub fn validate(&self) -> Vec<Violation> {
        validate(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    DuplicateKey,
    DuplicateSite,
    TimeOrder,
    NonFiniteTime,
    NonFiniteValue,
    NonFiniteCoord,
    LengthMismatch,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Rule::DuplicateKey => "duplicate key",
            Rule::DuplicateSite => "duplicate site",
            Rule::TimeOrder => "time order",
            Rule::NonFiniteTime => "non-finite time",
            Rule::NonFiniteValue => "non-finite value",
            Rule::NonFiniteCoord => "non-finite coordinate",
            Rule::LengthMismatch => "length mismatch",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub site: String,
    pub time: Option<f64>,
    pub rule: Rule,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.time {
            Some(t) => write!(f, "site {} at t={}: {}", self.site, t, self.rule),
            None => write!(f, "site {}: {}", self.site, self.rule),
        }
    }
}

/// Returns an empty list iff `series` satisfies every invariant.
pub fn validate(series: &StSeries) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for site in &series.sites {
        let v = |time, rule| Violation {
            site: site.site_id.clone(),
            time,
            rule,
        };
        if seen.insert(site.site_id.as_str(), 1).is_some() {
            out.push(v(None, Rule::DuplicateSite));
        }
        if !site.coord.x.is_finite() || !site.coord.y.is_finite() {
            out.push(v(None, Rule::NonFiniteCoord));
        }
        if site.times.len() != site.values.len() {
            out.push(v(None, Rule::LengthMismatch));
            continue;
        }
        for (k, (&t, val)) in site.times.iter().zip(&site.values).enumerate() {
            if !t.is_finite() {
                out.push(v(Some(t), Rule::NonFiniteTime));
                continue;
            }
            if k > 0 {
                let prev = site.times[k - 1];
                if t == prev {
                    out.push(v(Some(t), Rule::DuplicateKey));
                } else if prev.is_finite() && t < prev {
                    out.push(v(Some(t), Rule::TimeOrder));
                }
            }
            if let Some(x) = val {
                if !x.is_finite() {
                    out.push(v(Some(t), Rule::NonFiniteValue));
                }
            }
        }
    }
    out
}

/// Binary plume indicator keyed by (site, time).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorRow {
    pub site_id: String,
    pub time: f64,
    pub flag: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IndicatorSeries {
    pub rows: Vec<IndicatorRow>,
}

#[derive(Debug, Error, PartialEq)]
pub enum IndicatorError {
    #[error("conflicting indicator rows for site {site} at t={time}")]
    Conflict { site: String, time: f64 },
}

/// Attach an indicator flag to every response entry. Entries with no matching
/// indicator row take `default`. The result is shaped like `y`: one vector per
/// site, one flag per time stamp.
pub fn align_indicator(
    y: &StSeries,
    ind: &IndicatorSeries,
    default: bool,
) -> Result<Vec<Vec<bool>>, IndicatorError> {
    let mut table: HashMap<(&str, u64), bool> = HashMap::with_capacity(ind.rows.len());
    for row in &ind.rows {
        let key = (row.site_id.as_str(), row.time.to_bits());
        match table.get(&key) {
            Some(&f) if f != row.flag => {
                return Err(IndicatorError::Conflict {
                    site: row.site_id.clone(),
                    time: row.time,
                })
            }
            _ => {
                table.insert(key, row.flag);
            }
        }
    }
    Ok(y.sites
        .iter()
        .map(|s| {
            s.times
                .iter()
                .map(|t| {
                    table
                        .get(&(s.site_id.as_str(), t.to_bits()))
                        .copied()
                        .unwrap_or(default)
                })
                .collect()
        })
        .collect())
}
