//! Out-of-sample scores: RMSE, predictive R², interval coverage and width.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{Interval, Prediction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub rmse: f64,
    /// `1 - SSE/SST`; `None` when the scored truths have no spread.
    pub r2: Option<f64>,
    pub coverage: f64,
    pub mean_width: f64,
    pub min_width: f64,
    pub max_width: f64,
    pub n_scored: usize,
    /// Candidates without a prediction (flagged buffers).
    pub n_skipped: usize,
}

/// Scores medians and intervals against `truth`; `None` predictions are
/// counted as skipped.
pub fn score(truth: &[f64], predictions: &[Option<Interval>]) -> Result<ScoreReport> {
    if truth.len() != predictions.len() {
        return Err(Error::data(format!(
            "{} truths but {} predictions",
            truth.len(),
            predictions.len()
        )));
    }
    let pairs: Vec<(f64, Interval)> = truth
        .iter()
        .zip(predictions)
        .filter_map(|(&t, p)| p.map(|p| (t, p)))
        .collect();
    let n = pairs.len();
    if n == 0 {
        return Err(Error::data("no scored points: every prediction is flagged"));
    }
    let nf = n as f64;
    let sse: f64 = pairs.iter().map(|(t, p)| (t - p.median).powi(2)).sum();
    let mean_t = pairs.iter().map(|(t, _)| t).sum::<f64>() / nf;
    let sst: f64 = pairs.iter().map(|(t, _)| (t - mean_t).powi(2)).sum();
    let covered = pairs.iter().filter(|(t, p)| p.contains(*t)).count();
    let widths: Vec<f64> = pairs.iter().map(|(_, p)| p.width()).collect();
    Ok(ScoreReport {
        rmse: (sse / nf).sqrt(),
        r2: (sst > 0.0).then(|| 1.0 - sse / sst),
        coverage: covered as f64 / nf,
        mean_width: widths.iter().sum::<f64>() / nf,
        min_width: widths.iter().cloned().fold(f64::INFINITY, f64::min),
        max_width: widths.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        n_scored: n,
        n_skipped: predictions.len() - n,
    })
}

/// An observed value keyed by site and time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observed {
    pub site_id: String,
    pub time: f64,
    pub value: f64,
}

/// Scores predictions matched to observations by `(site_id, time)`. Every
/// observation needs a prediction row; the error lists the keys without one.
pub fn score_matched(observed: &[Observed], predictions: &[Prediction]) -> Result<ScoreReport> {
    let table: HashMap<(&str, u64), &Prediction> = predictions
        .iter()
        .map(|p| ((p.site_id.as_str(), p.time.to_bits()), p))
        .collect();
    let mut missing = Vec::new();
    let mut truth = Vec::with_capacity(observed.len());
    let mut preds = Vec::with_capacity(observed.len());
    for o in observed {
        match table.get(&(o.site_id.as_str(), o.time.to_bits())) {
            Some(p) => {
                truth.push(o.value);
                preds.push(p.interval);
            }
            None => missing.push(format!("{}@{}", o.site_id, o.time)),
        }
    }
    if !missing.is_empty() {
        let shown: Vec<&str> = missing.iter().take(20).map(|s| s.as_str()).collect();
        return Err(Error::data(format!(
            "{} observations have no prediction row: {}{}",
            missing.len(),
            shown.join(", "),
            if missing.len() > 20 { ", ..." } else { "" }
        )));
    }
    score(&truth, &preds)
}
