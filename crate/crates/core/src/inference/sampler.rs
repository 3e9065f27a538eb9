//! Metropolis-within-Gibbs sampler.
//!
//! One sweep: `β`, `σ_b²`, the kernel scales by log-scale random walk,
//! `σ²`, and in the full model `α` then `σ_ν²`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::conditionals::{
    acceptance_probability, alpha_conditional, beta_conditional, log_scale_log_ratio, sigma2_conditional,
    sigma_b2_conditional, sigma_nu2_conditional, ScaleLevels,
};
use super::{FitRows, Layout, McmcConfig, ModelSpec, TimeScale, Variant};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::predictor::{slices_for, BufferIndex, PredictorEngine, PredictorError};
use crate::predictor::term_weight;
use crate::rng;

/// A Metropolis block over one kernel scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleBlock {
    /// `ξ1`; in the full model, `ξ1` of plume-flagged observations.
    Space,
    Time,
}

impl ScaleBlock {
    pub fn name(self, variant: Variant) -> &'static str {
        match (self, variant) {
            (ScaleBlock::Space, Variant::Full) => "xi1_plume",
            (ScaleBlock::Space, _) => "xi1",
            (ScaleBlock::Time, _) => "xi2",
        }
    }
}

/// One log-scale random-walk move. Returns the new value and whether the
/// proposal was accepted.
pub fn log_scale_walk<R: Rng + ?Sized>(
    rng: &mut R,
    xi: f64,
    log_target_xi: f64,
    step: f64,
    log_target: impl FnOnce(f64) -> f64,
) -> (f64, f64, bool) {
    let z: f64 = rng.sample(StandardNormal);
    let prop = (xi.ln() + step * z).exp();
    let lt = if prop > 0.0 && prop.is_finite() {
        log_target(prop)
    } else {
        f64::NEG_INFINITY
    };
    let p = acceptance_probability(log_scale_log_ratio(lt, log_target_xi, prop, xi));
    if rng.random::<f64>() < p {
        (prop, lt, true)
    } else {
        (xi, log_target_xi, false)
    }
}

#[derive(Debug, Clone)]
struct Group {
    rows: Vec<usize>,
    slices: Vec<u32>,
}

/// Precomputed design pieces shared by every chain of one fit.
#[derive(Debug, Clone)]
pub struct Sampler<'a> {
    spec: ModelSpec,
    layout: Layout,
    index: Option<&'a BufferIndex>,
    rows: FitRows,
    fixed: DMatrix<f64>,
    ftf: DMatrix<f64>,
    fty: DVector<f64>,
    groups: Vec<Group>,
    fixed_w: Option<Vec<f64>>,
    terms: TermTable,
}

/// Slice terms of every row, flattened, with lags mapped to a table of
/// distinct values so a `ξ2` move costs one `exp` per distinct lag.
#[derive(Debug, Clone, Default)]
struct TermTable {
    start: Vec<usize>,
    lag_id: Vec<u32>,
    delta: Vec<f64>,
    lags: Vec<f64>,
}

impl TermTable {
    fn new(index: &BufferIndex, obs: &[usize]) -> Self {
        let mut lags: Vec<f64> = obs
            .iter()
            .flat_map(|&o| index.observations[o].terms.iter().map(|t| t.lag))
            .collect();
        lags.sort_by(f64::total_cmp);
        lags.dedup_by(|a, b| a.to_bits() == b.to_bits());
        let mut t = TermTable {
            start: vec![0],
            lags,
            ..Self::default()
        };
        for &o in obs {
            for term in &index.observations[o].terms {
                let id = t.lags.binary_search_by(|l| l.total_cmp(&term.lag)).expect("lag in table");
                t.lag_id.push(id as u32);
                t.delta.push(term.delta);
            }
            t.start.push(t.delta.len());
        }
        t
    }

    fn range(&self, row: usize) -> std::ops::Range<usize> {
        self.start[row]..self.start[row + 1]
    }

    fn fill(&self, xi_time: f64, out: &mut Vec<f64>) {
        let table: Vec<f64> = self.lags.iter().map(|&l| term_weight(l, 1.0, xi_time)).collect();
        out.clear();
        out.extend(self.lag_id.iter().zip(&self.delta).map(|(&j, &d)| table[j as usize] * d));
    }
}

/// The state of one chain. `w[i]` is the predictor of row `i` at the
/// current scales.
#[derive(Debug, Clone)]
pub struct ChainState<'a> {
    pub beta: Vec<f64>,
    pub sigma2: f64,
    pub sigma_b2: f64,
    /// One spatial scale per group: a single group, or non-plume then
    /// plume in the full model.
    pub xi_space: Vec<f64>,
    pub xi_time: f64,
    pub alpha: [f64; 2],
    pub sigma_nu2: f64,
    pub w: Vec<f64>,
    pub iteration: usize,
    fixed_mean: Vec<f64>,
    engines: Vec<PredictorEngine<'a>>,
    spare: Vec<PredictorEngine<'a>>,
    tw: Vec<f64>,
    spare_tw: Vec<f64>,
}

impl<'a> Sampler<'a> {
    /// Sampler for the index-based models. `plume` is shaped like the
    /// response series the index was built from.
    pub fn new(spec: &ModelSpec, index: &'a BufferIndex, plume: Option<&[Vec<bool>]>) -> Result<Self> {
        spec.validate()?;
        if spec.variant == Variant::Collocated {
            return Err(Error::config("the collocated model is fitted with fit_collocated"));
        }
        let c = &index.config;
        if c.radius != spec.radius || c.lag != spec.lag {
            return Err(PredictorError::WindowMismatch {
                kernel_r: spec.radius,
                kernel_q: spec.lag,
                index_r: c.radius,
                index_q: c.lag,
            }
            .into());
        }
        let rows = FitRows::from_index(index, plume);
        if rows.is_empty() {
            let flagged = index.observations.iter().filter(|o| o.response.is_some() && !o.valid).count();
            return Err(Error::data(format!(
                "no observation can enter the likelihood: {flagged} responses have fewer than {} covariate points in their buffer; widen the window or lower min_neighbors",
                c.min_neighbors
            )));
        }
        let (t0, t1) = rows.time_range().expect("nonempty rows");
        let layout = Layout::for_model(spec, t0, t1)?;
        let full = spec.variant == Variant::Full;
        let row_group: Vec<usize> = rows.plume.iter().map(|&p| usize::from(full && p)).collect();
        let n_groups = if full { 2 } else { 1 };
        let groups = (0..n_groups)
            .map(|g| {
                let members: Vec<usize> = (0..rows.len()).filter(|&i| row_group[i] == g).collect();
                let slices = slices_for(index, members.iter().map(|&i| rows.obs[i]));
                Group { rows: members, slices }
            })
            .collect();
        let terms = TermTable::new(index, &rows.obs);
        Self::assemble(spec.clone(), layout, Some(index), rows, groups, None, terms)
    }

    /// Sampler for a regression on a known covariate column.
    pub fn with_fixed_w(spec: &ModelSpec, y: Vec<f64>, time: Vec<f64>, w: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if y.is_empty() {
            return Err(Error::data("no paired observations to fit"));
        }
        let n = y.len();
        let rows = FitRows {
            obs: (0..n).collect(),
            y,
            time,
            plume: vec![false; n],
        };
        let layout = Layout::new(Variant::Baseline, None)?;
        let mut spec = spec.clone();
        spec.variant = Variant::Collocated;
        Self::assemble(spec, layout, None, rows, Vec::new(), Some(w), TermTable::default())
    }

    fn assemble(
        spec: ModelSpec,
        layout: Layout,
        index: Option<&'a BufferIndex>,
        rows: FitRows,
        groups: Vec<Group>,
        fixed_w: Option<Vec<f64>>,
        terms: TermTable,
    ) -> Result<Self> {
        let n = rows.len();
        let pf = layout.n_fixed();
        let mut fixed = DMatrix::zeros(n, pf);
        for i in 0..n {
            let r = layout.fixed_row(rows.time[i], rows.plume[i])?;
            for (j, v) in r.into_iter().enumerate() {
                fixed[(i, j)] = v;
            }
        }
        let ftf = fixed.transpose() * &fixed;
        let fty = fixed.transpose() * DVector::from_column_slice(&rows.y);
        Ok(Self {
            spec,
            layout,
            index,
            rows,
            fixed,
            ftf,
            fty,
            groups,
            fixed_w,
            terms,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn rows(&self) -> &FitRows {
        &self.rows
    }

    fn full(&self) -> bool {
        self.spec.variant == Variant::Full
    }

    fn time_sampled(&self) -> bool {
        self.fixed_w.is_none() && self.spec.priors.xi_time.fixed().is_none()
    }

    fn space_sampled(&self) -> bool {
        self.fixed_w.is_none()
    }

    /// Names of the recorded parameters, in storage order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.layout.beta_names();
        names.push("sigma2".into());
        names.push("sigma_b2".into());
        if self.space_sampled() {
            names.push(ScaleBlock::Space.name(self.spec.variant).into());
        }
        if self.time_sampled() {
            names.push("xi2".into());
        }
        if self.full() {
            if self.spec.priors.sample_alpha0 {
                names.push("alpha0".into());
            }
            names.push("alpha1".into());
            names.push("sigma_nu2".into());
        }
        names
    }

    fn record(&self, s: &ChainState<'_>, out: &mut [Vec<f64>]) {
        let mut vals = s.beta.clone();
        vals.push(s.sigma2);
        vals.push(s.sigma_b2);
        if self.space_sampled() {
            vals.push(*s.xi_space.last().expect("a spatial group"));
        }
        if self.time_sampled() {
            vals.push(s.xi_time);
        }
        if self.full() {
            if self.spec.priors.sample_alpha0 {
                vals.push(s.alpha[0]);
            }
            vals.push(s.alpha[1]);
            vals.push(s.sigma_nu2);
        }
        for (col, v) in out.iter_mut().zip(vals) {
            col.push(v);
        }
    }

    fn kernel(&self, xi_space: f64, xi_time: f64) -> Option<KernelSpec> {
        KernelSpec::normalize(self.spec.radius, self.spec.lag, xi_space, xi_time).ok()
    }

    fn slope(&self, beta: &[f64], row: usize) -> f64 {
        let pf = self.layout.n_fixed();
        if self.layout.n_slope() == 2 && self.rows.plume[row] {
            beta[pf] + beta[pf + 1]
        } else {
            beta[pf]
        }
    }

    fn resid(&self, s: &ChainState<'_>, row: usize, w: f64) -> f64 {
        self.rows.y[row] - s.fixed_mean[row] - self.slope(&s.beta, row) * w
    }

    pub fn rss(&self, s: &ChainState<'_>) -> f64 {
        (0..self.rows.len()).map(|i| self.resid(s, i, s.w[i]).powi(2)).sum()
    }

    /// Gaussian log-likelihood at the current state.
    pub fn log_likelihood(&self, s: &ChainState<'_>) -> f64 {
        let n = self.rows.len() as f64;
        -0.5 * n * (2.0 * std::f64::consts::PI * s.sigma2).ln() - self.rss(s) / (2.0 * s.sigma2)
    }

    /// Fresh engines at the state's scales, with `W` recomputed from
    /// scratch.
    fn refresh(&self, s: &mut ChainState<'a>) -> Result<()> {
        if let Some(w) = &self.fixed_w {
            s.w = w.clone();
            return Ok(());
        }
        let index = self.index.expect("index-based sampler");
        s.engines.clear();
        s.spare.clear();
        s.w = vec![f64::NAN; self.rows.len()];
        self.terms.fill(s.xi_time, &mut s.tw);
        for (g, grp) in self.groups.iter().enumerate() {
            let mut e = PredictorEngine::new(index, self.spec.mode);
            e.update_space(&grp.slices, s.xi_space[g]);
            let k = self
                .kernel(s.xi_space[g], s.xi_time)
                .ok_or_else(|| Error::numerical(format!("invalid kernel scales ({}, {})", s.xi_space[g], s.xi_time)))?;
            for &i in &grp.rows {
                s.w[i] = e.value_with(self.rows.obs[i], &s.tw[self.terms.range(i)], &k);
            }
            s.spare.push(PredictorEngine::new(index, self.spec.mode));
            s.engines.push(e);
        }
        let bad: Vec<String> = (0..self.rows.len())
            .filter(|&i| !s.w[i].is_finite())
            .map(|i| {
                let o = &index.observations[self.rows.obs[i]];
                format!("{}@{}", index.site_ids[o.site], o.time)
            })
            .collect();
        if !bad.is_empty() {
            return Err(Error::numerical(format!("non-finite predictor at {}", bad.join(", "))));
        }
        Ok(())
    }

    fn update_fixed_mean(&self, s: &mut ChainState<'_>) {
        let pf = self.layout.n_fixed();
        let b = DVector::from_column_slice(&s.beta[..pf]);
        s.fixed_mean = (&self.fixed * b).as_slice().to_vec();
    }

    /// `XᵀX` and `Xᵀy` for the current `W`.
    fn normal_equations(&self, w: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
        let pf = self.layout.n_fixed();
        let ns = self.layout.n_slope();
        let p = pf + ns;
        let n = self.rows.len();
        let mut slope_cols = DMatrix::zeros(n, ns);
        for i in 0..n {
            slope_cols[(i, 0)] = w[i];
            if ns == 2 && self.rows.plume[i] {
                slope_cols[(i, 1)] = w[i];
            }
        }
        let mut xtx = DMatrix::zeros(p, p);
        xtx.view_mut((0, 0), (pf, pf)).copy_from(&self.ftf);
        let fs = self.fixed.transpose() * &slope_cols;
        xtx.view_mut((0, pf), (pf, ns)).copy_from(&fs);
        xtx.view_mut((pf, 0), (ns, pf)).copy_from(&fs.transpose());
        xtx.view_mut((pf, pf), (ns, ns))
            .copy_from(&(slope_cols.transpose() * &slope_cols));
        let mut xty = DVector::zeros(p);
        xty.rows_mut(0, pf).copy_from(&self.fty);
        xty.rows_mut(pf, ns)
            .copy_from(&(slope_cols.transpose() * DVector::from_column_slice(&self.rows.y)));
        (xtx, xty)
    }

    /// A state at the given scales with least-squares coefficients and the
    /// residual variance.
    pub fn state_at(&self, xi_space: f64, xi_time: f64) -> Result<ChainState<'a>> {
        let full = self.full();
        let off = self.spec.plume_off_xi();
        let alpha_mean = self.spec.alpha_mean();
        let mut s = ChainState {
            beta: vec![0.0; self.layout.n_beta()],
            sigma2: 1.0,
            sigma_b2: 1.0,
            xi_space: if full { vec![off, xi_space] } else { vec![xi_space] },
            xi_time,
            alpha: alpha_mean,
            sigma_nu2: self.spec.priors.sigma_nu2.mean(),
            w: Vec::new(),
            iteration: 0,
            fixed_mean: vec![0.0; self.rows.len()],
            engines: Vec::new(),
            spare: Vec::new(),
            tw: Vec::new(),
            spare_tw: Vec::new(),
        };
        self.refresh(&mut s)?;
        let (mut xtx, xty) = self.normal_equations(&s.w);
        let p = xtx.nrows();
        let ridge = 1e-8 * (0..p).map(|k| xtx[(k, k)]).fold(0.0, f64::max).max(1e-12);
        for k in 0..p {
            xtx[(k, k)] += ridge;
        }
        let beta = xtx
            .cholesky()
            .ok_or_else(|| Error::numerical("initial least-squares system is singular"))?
            .solve(&xty);
        s.beta = beta.as_slice().to_vec();
        self.update_fixed_mean(&mut s);
        let n = self.rows.len();
        let dof = n.saturating_sub(p).max(1) as f64;
        s.sigma2 = (self.rss(&s) / dof).max(1e-8);
        s.sigma_b2 = (s.beta.iter().map(|b| b * b).sum::<f64>() / p as f64).max(1e-8);
        if !self.log_likelihood(&s).is_finite() {
            return Err(Error::numerical("non-finite initial likelihood"));
        }
        Ok(s)
    }

    /// Replace the coefficients (e.g. to freeze a test state).
    pub fn set_beta(&self, s: &mut ChainState<'_>, beta: &[f64]) {
        s.beta = beta.to_vec();
        self.update_fixed_mean(s);
    }

    fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ChainState<'a>> {
        let mut jitter = || (0.1 * rng.sample::<f64, _>(StandardNormal)).exp();
        let xi1 = if self.full() {
            self.spec.alpha_mean().iter().sum::<f64>().exp()
        } else {
            self.spec.priors.xi_space.mean()
        } * jitter();
        let xi2 = match self.spec.priors.xi_time {
            TimeScale::Fixed(v) => v,
            TimeScale::InvGamma { shape, scale } => {
                let m = if shape > 1.0 { scale / (shape - 1.0) } else { scale };
                m * jitter()
            }
        };
        self.state_at(xi1, xi2)
    }

    /// Unnormalized log prior of a spatial scale of group `g`.
    fn log_prior_space(&self, s: &ChainState<'_>, xi: f64) -> f64 {
        if self.full() {
            let m = s.alpha[0] + s.alpha[1];
            -xi.ln() - (xi.ln() - m).powi(2) / (2.0 * s.sigma_nu2)
        } else {
            self.spec.priors.xi_space.ln_pdf(xi)
        }
    }

    fn log_prior_time(&self, xi: f64) -> f64 {
        match self.spec.priors.xi_time {
            TimeScale::InvGamma { shape, scale } => super::InvGamma::new(shape, scale).ln_pdf(xi),
            TimeScale::Fixed(_) => 0.0,
        }
    }

    /// Proposed `W` for the rows touched by a scale move, written into
    /// `out`; the spatial move also refreshes the spare engine.
    fn propose(&self, s: &mut ChainState<'a>, block: ScaleBlock, xi_new: f64, out: &mut Vec<(usize, f64)>) -> bool {
        out.clear();
        match block {
            ScaleBlock::Space => {
                let g = self.groups.len() - 1;
                let Some(k) = self.kernel(xi_new, s.xi_time) else { return false };
                let e = &mut s.spare[g];
                e.update_space(&self.groups[g].slices, xi_new);
                for &i in &self.groups[g].rows {
                    out.push((i, e.value_with(self.rows.obs[i], &s.tw[self.terms.range(i)], &k)));
                }
            }
            ScaleBlock::Time => {
                self.terms.fill(xi_new, &mut s.spare_tw);
                for (g, grp) in self.groups.iter().enumerate() {
                    let Some(k) = self.kernel(s.xi_space[g], xi_new) else { return false };
                    for &i in &grp.rows {
                        let tw = &s.spare_tw[self.terms.range(i)];
                        out.push((i, s.engines[g].value_with(self.rows.obs[i], tw, &k)));
                    }
                }
            }
        }
        out.iter().all(|(_, w)| w.is_finite())
    }

    fn log_target_delta(&self, s: &ChainState<'_>, block: ScaleBlock, xi_new: f64, proposal: &[(usize, f64)]) -> f64 {
        let mut d_rss = 0.0;
        for &(i, w) in proposal {
            d_rss += self.resid(s, i, w).powi(2) - self.resid(s, i, s.w[i]).powi(2);
        }
        let (lp_new, lp_old) = match block {
            ScaleBlock::Space => {
                let old = *s.xi_space.last().expect("a spatial group");
                (self.log_prior_space(s, xi_new), self.log_prior_space(s, old))
            }
            ScaleBlock::Time => (self.log_prior_time(xi_new), self.log_prior_time(s.xi_time)),
        };
        lp_new - lp_old - d_rss / (2.0 * s.sigma2)
    }

    /// Log acceptance ratio of moving `block` to `xi_new` from state `s`.
    pub fn log_accept_ratio(&self, s: &mut ChainState<'a>, block: ScaleBlock, xi_new: f64) -> f64 {
        let mut prop = Vec::new();
        if !self.propose(s, block, xi_new, &mut prop) {
            return f64::NEG_INFINITY;
        }
        let old = match block {
            ScaleBlock::Space => *s.xi_space.last().expect("a spatial group"),
            ScaleBlock::Time => s.xi_time,
        };
        let delta = self.log_target_delta(s, block, xi_new, &prop);
        log_scale_log_ratio(delta, 0.0, xi_new, old)
    }

    fn mh<R: Rng + ?Sized>(
        &self,
        s: &mut ChainState<'a>,
        block: ScaleBlock,
        step: f64,
        rng: &mut R,
        scratch: &mut Vec<(usize, f64)>,
    ) -> bool {
        let old = match block {
            ScaleBlock::Space => *s.xi_space.last().expect("a spatial group"),
            ScaleBlock::Time => s.xi_time,
        };
        let z: f64 = rng.sample(StandardNormal);
        let xi_new = (old.ln() + step * z).exp();
        let ok = xi_new > 0.0 && xi_new.is_finite() && self.propose(s, block, xi_new, scratch);
        let lr = if ok {
            log_scale_log_ratio(self.log_target_delta(s, block, xi_new, scratch), 0.0, xi_new, old)
        } else {
            f64::NEG_INFINITY
        };
        let u: f64 = rng.random();
        if u >= acceptance_probability(lr) {
            return false;
        }
        for &(i, w) in scratch.iter() {
            s.w[i] = w;
        }
        match block {
            ScaleBlock::Space => {
                let g = self.groups.len() - 1;
                std::mem::swap(&mut s.engines[g], &mut s.spare[g]);
                s.xi_space[g] = xi_new;
            }
            ScaleBlock::Time => {
                std::mem::swap(&mut s.tw, &mut s.spare_tw);
                s.xi_time = xi_new;
            }
        }
        true
    }

    fn gibbs_beta<R: Rng + ?Sized>(&self, s: &mut ChainState<'_>, rng: &mut R) -> Result<()> {
        let (xtx, xty) = self.normal_equations(&s.w);
        let c = beta_conditional(&xtx, &xty, s.sigma2, s.sigma_b2)?;
        let draw = c.sample(rng);
        self.set_beta(s, draw.as_slice());
        Ok(())
    }

    fn levels(&self, s: &ChainState<'_>) -> (Vec<f64>, Vec<bool>) {
        if self.spec.priors.sample_alpha0 {
            (vec![s.xi_space[0].ln(), s.xi_space[1].ln()], vec![false, true])
        } else {
            (vec![s.xi_space[1].ln()], vec![true])
        }
    }

    /// One full sweep. `accepted[b]` is set for each accepted scale block.
    pub fn sweep<R: Rng + ?Sized>(
        &self,
        s: &mut ChainState<'a>,
        steps: &BTreeMap<ScaleBlock, f64>,
        rng: &mut R,
        accepted: &mut BTreeMap<ScaleBlock, bool>,
        scratch: &mut Vec<(usize, f64)>,
    ) -> Result<()> {
        let p = &self.spec.priors;
        self.gibbs_beta(s, rng)?;
        s.sigma_b2 = sigma_b2_conditional(p.sigma_b2, &s.beta).sample(rng);
        for (&block, &step) in steps {
            let a = self.mh(s, block, step, rng, scratch);
            accepted.insert(block, a);
        }
        s.sigma2 = sigma2_conditional(p.sigma2, self.rss(s), self.rows.len()).sample(rng);
        if self.full() {
            let (lx, pl) = self.levels(s);
            let lv = ScaleLevels { log_xi: &lx, plume: &pl };
            let a0 = (!p.sample_alpha0).then(|| self.spec.plume_off_xi().ln());
            let c = alpha_conditional(&lv, self.spec.alpha_mean(), p.alpha_var, s.sigma_nu2, a0)?;
            let d = c.sample(rng);
            s.alpha = match a0 {
                Some(a0) => [a0, d[0]],
                None => [d[0], d[1]],
            };
            s.sigma_nu2 = sigma_nu2_conditional(p.sigma_nu2, &lv, s.alpha).sample(rng);
        }
        s.iteration += 1;
        Ok(())
    }

    /// `W` recomputed from scratch at the state's scales.
    pub fn recompute_w(&self, s: &ChainState<'a>) -> Result<Vec<f64>> {
        let mut fresh = s.clone();
        self.refresh(&mut fresh)?;
        Ok(fresh.w)
    }

    fn blocks(&self) -> Vec<ScaleBlock> {
        let mut b = Vec::new();
        if self.space_sampled() {
            b.push(ScaleBlock::Space);
        }
        if self.time_sampled() {
            b.push(ScaleBlock::Time);
        }
        b
    }

    /// One chain on stream `chain` of `cfg.seed`.
    pub fn run_one(&self, cfg: &McmcConfig, chain: usize) -> Result<ChainDraws> {
        let mut rng = rng::stream(cfg.seed, chain as u64);
        let mut s = self.initial_state(&mut rng)?;
        let mut steps: BTreeMap<ScaleBlock, f64> = self.blocks().into_iter().map(|b| (b, cfg.initial_step)).collect();
        let mut batch: BTreeMap<ScaleBlock, usize> = steps.keys().map(|&b| (b, 0)).collect();
        let mut kept_accepts: BTreeMap<ScaleBlock, usize> = batch.clone();
        let mut accepted = BTreeMap::new();
        let mut scratch = Vec::new();
        let names = self.param_names();
        let mut draws = vec![Vec::with_capacity(cfg.n_kept()); names.len()];
        for it in 0..cfg.n_iter {
            self.sweep(&mut s, &steps, &mut rng, &mut accepted, &mut scratch)?;
            let warm = it < cfg.n_warmup;
            for (b, &a) in &accepted {
                if a {
                    *batch.get_mut(b).expect("block") += 1;
                    if !warm {
                        *kept_accepts.get_mut(b).expect("block") += 1;
                    }
                }
            }
            if warm && (it + 1) % cfg.adapt_every == 0 {
                let [lo, hi] = cfg.target_acceptance;
                for (b, step) in steps.iter_mut() {
                    let rate = batch[b] as f64 / cfg.adapt_every as f64;
                    if rate < lo {
                        *step *= 0.8;
                    } else if rate > hi {
                        *step *= 1.25;
                    }
                }
                batch.values_mut().for_each(|v| *v = 0);
            }
            if !warm {
                self.record(&s, &mut draws);
            }
        }
        let acceptance = kept_accepts
            .iter()
            .map(|(b, &n)| (b.name(self.spec.variant).to_string(), n as f64 / cfg.n_kept() as f64))
            .collect();
        let steps = steps
            .iter()
            .map(|(b, &v)| (b.name(self.spec.variant).to_string(), v))
            .collect();
        Ok(ChainDraws {
            draws,
            acceptance,
            steps,
        })
    }

    /// All chains of `cfg`, in parallel, merged in chain order.
    pub fn run(&self, cfg: &McmcConfig) -> Result<PosteriorSamples> {
        cfg.validate()?;
        let chains = (0..cfg.n_chains)
            .into_par_iter()
            .map(|c| self.run_one(cfg, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(PosteriorSamples {
            spec: self.spec.clone(),
            layout: self.layout.clone(),
            names: self.param_names(),
            n_iter: cfg.n_iter,
            n_warmup: cfg.n_warmup,
            seed: cfg.seed,
            n_obs: self.rows.len(),
            chains,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDraws {
    /// `draws[param][k]`, post-warmup.
    pub draws: Vec<Vec<f64>>,
    pub acceptance: BTreeMap<String, f64>,
    pub steps: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub spec: ModelSpec,
    pub layout: Layout,
    pub names: Vec<String>,
    pub n_iter: usize,
    pub n_warmup: usize,
    pub seed: u64,
    pub n_obs: usize,
    pub chains: Vec<ChainDraws>,
}

impl PosteriorSamples {
    pub fn param(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Draws of one parameter, one vector per chain.
    pub fn chains_of(&self, name: &str) -> Option<Vec<&[f64]>> {
        let k = self.param(name)?;
        Some(self.chains.iter().map(|c| c.draws[k].as_slice()).collect())
    }

    /// Draws of one parameter, chains concatenated.
    pub fn pooled(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.param(name)?;
        Some(self.chains.iter().flat_map(|c| c.draws[k].iter().copied()).collect())
    }

    pub fn n_kept(&self) -> usize {
        self.n_iter - self.n_warmup
    }

    /// The `W` slope for non-plume observations.
    pub fn slope_name(&self) -> &'static str {
        if self.layout.variant.uses_indicator() {
            "beta10"
        } else {
            "beta1"
        }
    }

    pub fn spatial_scale_name(&self) -> &'static str {
        ScaleBlock::Space.name(self.spec.variant)
    }
}

/// Fit `spec` to the responses of `index`.
pub fn run_chain(
    spec: &ModelSpec,
    index: &BufferIndex,
    plume: Option<&[Vec<bool>]>,
    cfg: &McmcConfig,
) -> Result<PosteriorSamples> {
    Sampler::new(spec, index, plume)?.run(cfg)
}
