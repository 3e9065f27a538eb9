//! Buffer indexing and the Voronoi space-time quadrature of `W(s_n, t_i)`.
//!
//! For a response observation `(n, i)` the buffer holds every present
//! covariate point with `‖s_m − s_n‖ ≤ r` and `0 ≤ t_i − t_j ≤ q`. Each
//! neighbour carries the quadrature weight `Δ = area(V) · δ`, where `V` is its
//! Voronoi cell within the disk on that time slice and `δ` is the slice's
//! temporal increment.
//!
//! Geometry is grouped by `(response site, time slice)`: every slice block
//! stores `(neighbour, area, value)` once and is shared by all observations
//! whose window covers it. The separable kernel then factorizes as
//!
//! ```text
//! W(n, i) = c1 c2 Σ_slices exp(-l/ξ2) δ Σ_entries exp(-h/ξ1) · area · value
//! ```
//!
//! so a change of `ξ1` costs one pass over the slice entries and a change of
//! `ξ2` touches only the per-observation slice terms.

use std::collections::HashMap;

use rayon::prelude::*;
use rstar::primitives::GeomWithData;
use rstar::RTree;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Point, StSeries};
use crate::geometry::{temporal_increments, voronoi_disk, GeometryError, COINCIDENT_TOL};
use crate::kernels::KernelSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictorError {
    #[error("observation {0} is flagged (too few covariate points in its buffer)")]
    Flagged(usize),
    #[error("kernel window (r={kernel_r}, q={kernel_q}) does not match the index (r={index_r}, q={index_q})")]
    WindowMismatch {
        kernel_r: f64,
        kernel_q: f64,
        index_r: f64,
        index_q: f64,
    },
    #[error("buffer radius and lag must be positive, got r={0}, q={1}")]
    InvalidWindow(f64, f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorMode {
    /// `Σ κ X Δ`, the quadrature as written.
    #[default]
    Raw,
    /// `Σ κ X Δ / Σ κ Δ`, exact for constant fields.
    Renormalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BufferConfig {
    pub radius: f64,
    pub lag: f64,
    #[serde(default = "default_min_neighbors")]
    pub min_neighbors: usize,
}

fn default_min_neighbors() -> usize {
    1
}

impl BufferConfig {
    pub fn new(radius: f64, lag: f64) -> Self {
        Self {
            radius,
            lag,
            min_neighbors: 1,
        }
    }
}

/// A distinct covariate location inside a response site's disk. Covariate
/// sites closer than [`COINCIDENT_TOL`] are merged into one group.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGroup {
    pub coord: Point,
    pub distance: f64,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    pub center: Point,
    pub groups: Vec<NeighborGroup>,
}

/// Present covariate points of one time slice inside one response disk,
/// stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceBlock {
    pub site: usize,
    pub time: f64,
    pub groups: Vec<u32>,
    pub areas: Vec<f64>,
    pub values: Vec<f64>,
    weighted: Vec<f64>,
    dense: bool,
}

impl SliceBlock {
    fn new(site: usize, time: f64, groups: Vec<u32>, areas: Vec<f64>, values: Vec<f64>) -> Self {
        let weighted = areas.iter().zip(&values).map(|(a, v)| a * v).collect();
        let dense = groups.iter().enumerate().all(|(k, &g)| g as usize == k);
        Self {
            site,
            time,
            groups,
            areas,
            values,
            weighted,
            dense,
        }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn area_sum(&self) -> f64 {
        self.areas.iter().sum()
    }
}

/// Eight-lane dot product; the fixed association order keeps results
/// reproducible.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let split = n - n % 8;
    for (x, y) in a[..split].chunks_exact(8).zip(b[..split].chunks_exact(8)) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for k in split..n {
        tail += a[k] * b[k];
    }
    lanes(acc) + tail
}

fn lanes(acc: [f64; 8]) -> f64 {
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

fn gather_dot(table: &[f64], groups: &[u32], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let n = groups.len();
    let split = n - n % 8;
    for (g, y) in groups[..split].chunks_exact(8).zip(b[..split].chunks_exact(8)) {
        for l in 0..8 {
            acc[l] += table[g[l] as usize] * y[l];
        }
    }
    let mut tail = 0.0;
    for k in split..n {
        tail += table[groups[k] as usize] * b[k];
    }
    lanes(acc) + tail
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceTerm {
    pub slice: u32,
    pub lag: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObsBuffer {
    pub site: usize,
    pub time_index: usize,
    pub time: f64,
    pub response: Option<f64>,
    pub terms: Vec<SliceTerm>,
    pub n_neighbors: usize,
    pub valid: bool,
}

/// One covariate point in an observation's buffer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub coord: Point,
    pub time: f64,
    pub value: f64,
    pub distance: f64,
    pub lag: f64,
    pub area: f64,
    pub delta: f64,
}

impl Neighbor {
    pub fn quad_weight(&self) -> f64 {
        self.area * self.delta
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub tessellations: usize,
    pub cache_hits: usize,
}

impl CacheStats {
    pub fn hit_rate(&self) -> f64 {
        let total = self.tessellations + self.cache_hits;
        if total == 0 {
            0.0
        } else {
            self.cache_hits as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferIndex {
    pub config: BufferConfig,
    pub site_ids: Vec<String>,
    pub neighborhoods: Vec<Neighborhood>,
    pub slices: Vec<SliceBlock>,
    pub observations: Vec<ObsBuffer>,
    pub stats: CacheStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferDiagnostic {
    pub site_id: String,
    pub time: f64,
    pub n_neighbors: usize,
    pub sum_delta: f64,
    pub valid: bool,
}

impl BufferIndex {
    pub fn n_valid(&self) -> usize {
        self.observations.iter().filter(|o| o.valid).count()
    }

    /// Every covariate point in the buffer of observation `obs`.
    pub fn neighbors(&self, obs: usize) -> impl Iterator<Item = Neighbor> + '_ {
        let o = &self.observations[obs];
        let hood = &self.neighborhoods[o.site];
        o.terms.iter().flat_map(move |term| {
            let block = &self.slices[term.slice as usize];
            (0..block.len()).map(move |k| {
                let g = &hood.groups[block.groups[k] as usize];
                Neighbor {
                    coord: g.coord,
                    time: block.time,
                    value: block.values[k],
                    distance: g.distance,
                    lag: term.lag,
                    area: block.areas[k],
                    delta: term.delta,
                }
            })
        })
    }

    /// `Σ Δ` over the buffer of observation `obs`.
    pub fn sum_delta(&self, obs: usize) -> f64 {
        self.observations[obs]
            .terms
            .iter()
            .map(|t| t.delta * self.slices[t.slice as usize].area_sum())
            .sum()
    }

    pub fn diagnostics(&self) -> Vec<BufferDiagnostic> {
        self.observations
            .iter()
            .enumerate()
            .map(|(k, o)| BufferDiagnostic {
                site_id: self.site_ids[o.site].clone(),
                time: o.time,
                n_neighbors: o.n_neighbors,
                sum_delta: self.sum_delta(k),
                valid: o.valid,
            })
            .collect()
    }

    fn check_window(&self, spec: &KernelSpec) -> Result<(), PredictorError> {
        let c = &self.config;
        if spec.radius != c.radius || spec.lag != c.lag {
            return Err(PredictorError::WindowMismatch {
                kernel_r: spec.radius,
                kernel_q: spec.lag,
                index_r: c.radius,
                index_q: c.lag,
            });
        }
        Ok(())
    }
}

type Tree = RTree<GeomWithData<[f64; 2], usize>>;

/// Indexes the buffers of every `(site, time)` entry of `y`, present or not.
/// Entries without a response value are still indexed so that prediction
/// targets share the same machinery.
pub fn build_index(y: &StSeries, x: &StSeries, config: BufferConfig) -> Result<BufferIndex, PredictorError> {
    let BufferConfig { radius, lag, .. } = config;
    if !(radius > 0.0 && radius.is_finite() && lag > 0.0 && lag.is_finite()) {
        return Err(PredictorError::InvalidWindow(radius, lag));
    }
    let tree: Tree = RTree::bulk_load(
        x.sites
            .iter()
            .enumerate()
            .map(|(m, s)| GeomWithData::new([s.coord.x, s.coord.y], m))
            .collect(),
    );
    let per_site: Vec<SiteIndex> = (0..y.sites.len())
        .into_par_iter()
        .map(|n| index_site(n, y, x, &tree, config))
        .collect::<Result<_, _>>()?;

    let mut index = BufferIndex {
        config,
        site_ids: y.sites.iter().map(|s| s.site_id.clone()).collect(),
        neighborhoods: Vec::with_capacity(per_site.len()),
        slices: Vec::new(),
        observations: Vec::with_capacity(y.n_entries()),
        stats: CacheStats::default(),
    };
    for site in per_site {
        let offset = index.slices.len() as u32;
        index.neighborhoods.push(site.hood);
        index.slices.extend(site.slices);
        for mut o in site.observations {
            for t in &mut o.terms {
                t.slice += offset;
            }
            index.observations.push(o);
        }
        index.stats.tessellations += site.stats.tessellations;
        index.stats.cache_hits += site.stats.cache_hits;
    }
    Ok(index)
}

struct SiteIndex {
    hood: Neighborhood,
    slices: Vec<SliceBlock>,
    observations: Vec<ObsBuffer>,
    stats: CacheStats,
}

fn neighborhood(center: Point, x: &StSeries, tree: &Tree, radius: f64) -> Neighborhood {
    let mut found: Vec<(Point, usize)> = tree
        .locate_within_distance([center.x, center.y], radius * radius)
        .map(|g| (x.sites[g.data].coord, g.data))
        .filter(|(p, _)| p.dist(&center) <= radius)
        .collect();
    // canonical order, independent of any point outside the disk
    found.sort_by(|a, b| {
        a.0.x
            .total_cmp(&b.0.x)
            .then(a.0.y.total_cmp(&b.0.y))
            .then(a.1.cmp(&b.1))
    });
    let mut groups: Vec<NeighborGroup> = Vec::with_capacity(found.len());
    for (p, m) in found {
        let mut merged = false;
        for g in groups.iter_mut().rev() {
            if p.x - g.coord.x >= COINCIDENT_TOL {
                break;
            }
            if g.coord.dist(&p) < COINCIDENT_TOL {
                g.members.push(m);
                merged = true;
                break;
            }
        }
        if !merged {
            groups.push(NeighborGroup {
                coord: p,
                distance: p.dist(&center),
                members: vec![m],
            });
        }
    }
    Neighborhood { center, groups }
}

fn index_site(n: usize, y: &StSeries, x: &StSeries, tree: &Tree, config: BufferConfig) -> Result<SiteIndex, PredictorError> {
    let site = &y.sites[n];
    let hood = neighborhood(site.coord, x, tree, config.radius);

    // (time, group, value) for every present covariate point in the disk
    let mut points: Vec<(f64, u32, f64)> = Vec::new();
    for (g, group) in hood.groups.iter().enumerate() {
        for &m in &group.members {
            let s = &x.sites[m];
            for (&t, v) in s.times.iter().zip(&s.values) {
                if let Some(v) = v {
                    points.push((t, g as u32, *v));
                }
            }
        }
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    // distinct slices; coincident sites present at the same time are averaged
    let mut slice_times: Vec<f64> = Vec::new();
    let mut slice_points: Vec<Vec<(u32, f64)>> = Vec::new();
    let mut k = 0;
    while k < points.len() {
        let t = points[k].0;
        let mut members: Vec<(u32, f64)> = Vec::new();
        while k < points.len() && points[k].0 == t {
            let g = points[k].1;
            let mut sum = 0.0;
            let mut count = 0usize;
            while k < points.len() && points[k].0 == t && points[k].1 == g {
                sum += points[k].2;
                count += 1;
                k += 1;
            }
            members.push((g, if count == 1 { sum } else { sum / count as f64 }));
        }
        slice_times.push(t);
        slice_points.push(members);
    }

    // observation windows over the slice list
    let windows: Vec<(usize, usize)> = site
        .times
        .iter()
        .map(|&t| {
            let lo = slice_times.partition_point(|&s| s < t - config.lag);
            let hi = slice_times.partition_point(|&s| s <= t);
            (lo, hi)
        })
        .collect();
    let mut needed = vec![false; slice_times.len()];
    for &(lo, hi) in &windows {
        for flag in &mut needed[lo..hi] {
            *flag = true;
        }
    }

    let mut cache: HashMap<Vec<u32>, Vec<f64>> = HashMap::new();
    let mut stats = CacheStats::default();
    let mut local_id = vec![u32::MAX; slice_times.len()];
    let mut slices = Vec::new();
    for (j, members) in slice_points.iter().enumerate() {
        if !needed[j] {
            continue;
        }
        let key: Vec<u32> = members.iter().map(|(g, _)| *g).collect();
        let areas: Vec<f64> = match cache.get(&key) {
            Some(a) => {
                stats.cache_hits += 1;
                a.clone()
            }
            None => {
                let pts: Vec<Point> = key.iter().map(|&g| hood.groups[g as usize].coord).collect();
                let tess = voronoi_disk(site.coord, config.radius, &pts)?;
                stats.tessellations += 1;
                cache.insert(key.clone(), tess.cell_area.clone());
                tess.cell_area
            }
        };
        local_id[j] = slices.len() as u32;
        slices.push(SliceBlock::new(
            n,
            slice_times[j],
            key,
            areas,
            members.iter().map(|&(_, v)| v).collect(),
        ));
    }

    let mut observations = Vec::with_capacity(site.times.len());
    for (i, (&t, &(lo, hi))) in site.times.iter().zip(&windows).enumerate() {
        let mut terms = Vec::new();
        if hi > lo {
            if let Ok(inc) = temporal_increments(t, config.lag, &slice_times[lo..hi]) {
                // dropped lower-edge slices shift the start of the kept run
                let first = hi - inc.times.len();
                for (k, (&ts, &d)) in inc.times.iter().zip(&inc.delta).enumerate() {
                    terms.push(SliceTerm {
                        slice: local_id[first + k],
                        lag: t - ts,
                        delta: d,
                    });
                }
            }
        }
        let n_neighbors: usize = terms.iter().map(|tm| slices[tm.slice as usize].len()).sum();
        observations.push(ObsBuffer {
            site: n,
            time_index: i,
            time: t,
            response: site.values[i],
            valid: n_neighbors >= config.min_neighbors.max(1),
            terms,
            n_neighbors,
        });
    }

    Ok(SiteIndex {
        hood,
        slices,
        observations,
        stats,
    })
}

/// Evaluates `W` over an index for changing kernel scales without touching
/// the geometry.
///
/// Slice sums are refreshed only for the slices passed to
/// [`PredictorEngine::update_space`]; the MCMC sampler keeps one engine per
/// spatial-scale group.
#[derive(Debug, Clone)]
pub struct PredictorEngine<'a> {
    index: &'a BufferIndex,
    mode: PredictorMode,
    site_kernel: Vec<Vec<f64>>,
    weighted: Vec<f64>,
    mass: Vec<f64>,
}

impl<'a> PredictorEngine<'a> {
    pub fn new(index: &'a BufferIndex, mode: PredictorMode) -> Self {
        Self {
            index,
            mode,
            site_kernel: vec![Vec::new(); index.neighborhoods.len()],
            weighted: vec![0.0; index.slices.len()],
            mass: vec![0.0; index.slices.len()],
        }
    }

    pub fn index(&self) -> &'a BufferIndex {
        self.index
    }

    pub fn mode(&self) -> PredictorMode {
        self.mode
    }

    /// Recomputes the spatial slice sums of `slices` (sorted by site) at
    /// spatial scale `xi_space`.
    pub fn update_space(&mut self, slices: &[u32], xi_space: f64) {
        let idx = self.index;
        let mut current_site = usize::MAX;
        for &s in slices {
            let block = &idx.slices[s as usize];
            if block.site != current_site {
                current_site = block.site;
                let table = &mut self.site_kernel[current_site];
                table.clear();
                table.extend(
                    idx.neighborhoods[current_site]
                        .groups
                        .iter()
                        .map(|g| (-g.distance / xi_space).exp()),
                );
            }
            let table = &self.site_kernel[current_site];
            let along = |b: &[f64]| {
                if block.dense {
                    dot(table, b)
                } else {
                    gather_dot(table, &block.groups, b)
                }
            };
            self.weighted[s as usize] = along(&block.weighted);
            if self.mode == PredictorMode::Renormalized {
                self.mass[s as usize] = along(&block.areas);
            }
        }
    }

    /// `W` for observation `obs` given the current slice sums. `spec`
    /// supplies `ξ2` and the normalizing constants.
    pub fn value(&self, obs: usize, spec: &KernelSpec) -> f64 {
        let o = &self.index.observations[obs];
        let tw = o.terms.iter().map(|t| term_weight(t.lag, t.delta, spec.xi_time));
        self.accumulate(obs, tw, spec)
    }

    /// `W` with the temporal term weights `e^{-lag/ξ2} Δ` of `obs` supplied
    /// by the caller, in term order.
    pub fn value_with(&self, obs: usize, tw: &[f64], spec: &KernelSpec) -> f64 {
        self.accumulate(obs, tw.iter().copied(), spec)
    }

    fn accumulate(&self, obs: usize, tw: impl Iterator<Item = f64>, spec: &KernelSpec) -> f64 {
        let o = &self.index.observations[obs];
        match self.mode {
            PredictorMode::Raw => {
                let mut acc = 0.0;
                for (t, w) in o.terms.iter().zip(tw) {
                    acc += w * self.weighted[t.slice as usize];
                }
                spec.c_space * spec.c_time * acc
            }
            PredictorMode::Renormalized => {
                let mut num = 0.0;
                let mut den = 0.0;
                for (t, w) in o.terms.iter().zip(tw) {
                    num += w * self.weighted[t.slice as usize];
                    den += w * self.mass[t.slice as usize];
                }
                num / den
            }
        }
    }
}

/// Temporal weight of one slice term.
#[inline]
pub fn term_weight(lag: f64, delta: f64, xi_time: f64) -> f64 {
    (-lag / xi_time).exp() * delta
}

/// Slices referenced by the given observations, sorted and deduplicated.
pub fn slices_for(index: &BufferIndex, observations: impl IntoIterator<Item = usize>) -> Vec<u32> {
    let mut out: Vec<u32> = observations
        .into_iter()
        .flat_map(|o| index.observations[o].terms.iter().map(|t| t.slice))
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// `W` for every observation of the index; flagged observations give `None`.
pub fn weighted_predictor(
    index: &BufferIndex,
    spec: &KernelSpec,
    mode: PredictorMode,
) -> Result<Vec<Option<f64>>, PredictorError> {
    index.check_window(spec)?;
    let valid: Vec<usize> = (0..index.observations.len())
        .filter(|&o| index.observations[o].valid)
        .collect();
    let mut engine = PredictorEngine::new(index, mode);
    engine.update_space(&slices_for(index, valid.iter().copied()), spec.xi_space);
    Ok(index
        .observations
        .iter()
        .enumerate()
        .map(|(k, o)| o.valid.then(|| engine.value(k, spec)))
        .collect())
}

/// `W` for a single observation; an error if it is flagged.
pub fn predictor_at(
    index: &BufferIndex,
    spec: &KernelSpec,
    mode: PredictorMode,
    obs: usize,
) -> Result<f64, PredictorError> {
    index.check_window(spec)?;
    if !index.observations[obs].valid {
        return Err(PredictorError::Flagged(obs));
    }
    let mut engine = PredictorEngine::new(index, mode);
    engine.update_space(&slices_for(index, [obs]), spec.xi_space);
    Ok(engine.value(obs, spec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SiteSeries;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn grid_series(half: i32, days: std::ops::RangeInclusive<i32>, f: impl Fn(f64, f64, f64) -> f64) -> StSeries {
        let mut sites = Vec::new();
        for i in -half..=half {
            for j in -half..=half {
                let p = Point::new(i as f64, j as f64);
                let mut s = SiteSeries::new(format!("g{i}_{j}"), p);
                for d in days.clone() {
                    s.push(d as f64, Some(f(p.x, p.y, d as f64)));
                }
                sites.push(s);
            }
        }
        StSeries::new(sites)
    }

    fn response(at: &[Point], days: &[f64]) -> StSeries {
        StSeries::new(
            at.iter()
                .enumerate()
                .map(|(k, &p)| {
                    let mut s = SiteSeries::new(format!("y{k}"), p);
                    for &d in days {
                        s.push(d, Some(0.0));
                    }
                    s
                })
                .collect(),
        )
    }

    #[test]
    fn full_grid_counts_and_conservation() {
        let x = grid_series(14, 0..=12, |_, _, _| 1.0);
        let c = Point::new(0.37, -0.21);
        let y = response(&[c], &[10.0]);
        let idx = build_index(&y, &x, BufferConfig::new(10.0, 3.0)).unwrap();
        let in_disk = x.sites.iter().filter(|s| s.coord.dist(&c) <= 10.0).count();
        let o = &idx.observations[0];
        // days 8, 9, 10 (day 7 lies on the window edge and carries no measure)
        assert_eq!(o.n_neighbors, in_disk * 3);
        assert!(o.valid);
        let sd = idx.sum_delta(0);
        assert!((sd - PI * 100.0 * 3.0).abs() / sd < 1e-6);
        // one tessellation, reused on the other days
        assert_eq!(idx.stats.tessellations, 1);
        assert!(idx.stats.cache_hits >= 2);
    }

    #[test]
    fn empty_window_is_flagged() {
        let mut x = grid_series(3, 0..=5, |_, _, _| 1.0);
        for s in &mut x.sites {
            for (t, v) in s.times.iter().zip(s.values.iter_mut()) {
                if *t >= 3.0 {
                    *v = None;
                }
            }
        }
        let y = response(&[Point::new(0.0, 0.0)], &[5.0, 3.0]);
        let idx = build_index(&y, &x, BufferConfig::new(2.0, 2.0)).unwrap();
        assert_eq!(idx.observations[0].n_neighbors, 0);
        assert!(!idx.observations[0].valid);
        let k = KernelSpec::normalize(2.0, 2.0, 1.0, 1.0).unwrap();
        assert_eq!(predictor_at(&idx, &k, PredictorMode::Raw, 0), Err(PredictorError::Flagged(0)));
        assert!(idx.observations[1].valid);
        let w = weighted_predictor(&idx, &k, PredictorMode::Raw).unwrap();
        assert!(w[0].is_none() && w[1].is_some());
    }

    #[test]
    fn masked_grid_counts() {
        let mut x = grid_series(12, 0..=6, |_, _, _| 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for s in &mut x.sites {
            for v in &mut s.values {
                if rng.random::<f64>() < 0.3 {
                    *v = None;
                }
            }
        }
        let c = Point::new(0.2, 0.4);
        let y = response(&[c], &[6.0]);
        let idx = build_index(&y, &x, BufferConfig::new(10.0, 3.0)).unwrap();
        let oracle: usize = x
            .sites
            .iter()
            .filter(|s| s.coord.dist(&c) <= 10.0)
            .map(|s| {
                s.times
                    .iter()
                    .zip(&s.values)
                    .filter(|(&t, v)| v.is_some() && t > 3.0 && t <= 6.0)
                    .count()
            })
            .sum();
        assert_eq!(idx.observations[0].n_neighbors, oracle);
        for s in &idx.slices {
            assert!((s.area_sum() - 100.0 * PI).abs() < 1e-9 * 100.0 * PI);
        }
    }

    #[test]
    fn constant_field_renormalized_is_exact() {
        let x = grid_series(12, 0..=8, |_, _, _| 3.25);
        let y = response(&[Point::new(0.5, 0.25), Point::new(-2.0, 1.0)], &[5.0, 8.0]);
        let idx = build_index(&y, &x, BufferConfig::new(10.0, 4.0)).unwrap();
        let k = KernelSpec::normalize(10.0, 4.0, 2.0, 0.5).unwrap();
        for w in weighted_predictor(&idx, &k, PredictorMode::Renormalized).unwrap() {
            assert!((w.unwrap() - 3.25).abs() < 1e-13);
        }
    }

    #[test]
    fn constant_field_raw_with_fine_sampling() {
        // 0.25-km grid, hourly-scale slices: Σ κΔ is close to one
        let mut sites = Vec::new();
        let times: Vec<f64> = (0..=775).map(|k| 2.9 + k as f64 * 0.004).collect();
        for i in -24..=24 {
            for j in -24..=24 {
                let p = Point::new(0.25 * i as f64, 0.25 * j as f64);
                let mut s = SiteSeries::new(format!("{i}_{j}"), p);
                for &t in &times {
                    s.push(t, Some(2.0));
                }
                sites.push(s);
            }
        }
        let x = StSeries::new(sites);
        let y = response(&[Point::new(0.1, 0.05)], &[6.0]);
        let idx = build_index(&y, &x, BufferConfig::new(5.0, 3.0)).unwrap();
        assert_eq!(idx.observations[0].terms.len(), 750);
        let k = KernelSpec::normalize(5.0, 3.0, 2.0, 0.5).unwrap();
        let w = predictor_at(&idx, &k, PredictorMode::Raw, 0).unwrap();
        assert!((w - 2.0).abs() / 2.0 < 0.01, "{w}");
    }

    #[test]
    fn outside_points_do_not_change_w() {
        let x = grid_series(15, 0..=6, |a, b, t| 1.0 + 0.1 * a - 0.05 * b + 0.3 * t);
        let c = Point::new(0.3, 0.1);
        let y = response(&[c], &[6.0, 5.0]);
        let k = KernelSpec::normalize(6.0, 3.0, 2.0, 1.0).unwrap();
        let full = build_index(&y, &x, BufferConfig::new(6.0, 3.0)).unwrap();
        let trimmed = x.filter_sites(|_, s| s.coord.dist(&c) <= 6.0);
        let part = build_index(&y, &trimmed, BufferConfig::new(6.0, 3.0)).unwrap();
        for mode in [PredictorMode::Raw, PredictorMode::Renormalized] {
            let a = weighted_predictor(&full, &k, mode).unwrap();
            let b = weighted_predictor(&part, &k, mode).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert_eq!(u.unwrap().to_bits(), v.unwrap().to_bits());
            }
        }
    }

    #[test]
    fn coincident_sites_are_merged_and_averaged() {
        let mut x = StSeries::default();
        for (id, p, v) in [("a", Point::new(1.0, 0.0), 2.0), ("b", Point::new(1.0, 0.0), 4.0), ("c", Point::new(-1.0, 0.0), 1.0)] {
            let mut s = SiteSeries::new(id, p);
            s.push(1.0, Some(v));
            x.sites.push(s);
        }
        let y = response(&[Point::new(0.0, 0.0)], &[1.0]);
        let idx = build_index(&y, &x, BufferConfig::new(5.0, 1.0)).unwrap();
        assert_eq!(idx.observations[0].n_neighbors, 2);
        let values: Vec<f64> = idx.neighbors(0).map(|n| n.value).collect();
        assert!(values.contains(&3.0) && values.contains(&1.0));
    }

    #[test]
    fn window_mismatch_rejected() {
        let x = grid_series(2, 0..=1, |_, _, _| 1.0);
        let y = response(&[Point::new(0.0, 0.0)], &[1.0]);
        let idx = build_index(&y, &x, BufferConfig::new(2.0, 1.0)).unwrap();
        let k = KernelSpec::normalize(3.0, 1.0, 1.0, 1.0).unwrap();
        assert!(matches!(
            weighted_predictor(&idx, &k, PredictorMode::Raw),
            Err(PredictorError::WindowMismatch { .. })
        ));
    }

    #[test]
    fn engine_matches_direct_neighbor_sum() {
        let x = grid_series(8, 0..=6, |a, b, t| (0.3 * a).sin() + 2.0 + 0.1 * b * t);
        let y = response(&[Point::new(0.4, -0.3), Point::new(2.0, 2.0)], &[4.0, 6.0]);
        let idx = build_index(&y, &x, BufferConfig::new(6.0, 3.0)).unwrap();
        let k = KernelSpec::normalize(6.0, 3.0, 1.7, 0.8).unwrap();
        let w = weighted_predictor(&idx, &k, PredictorMode::Raw).unwrap();
        for (o, wo) in w.iter().enumerate() {
            let direct: f64 = idx
                .neighbors(o)
                .map(|n| k.weight(n.distance, n.lag) * n.value * n.quad_weight())
                .sum();
            assert!((wo.unwrap() - direct).abs() < 1e-12 * direct.abs());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn renormalized_is_convex_and_raw_is_monotone(seed in 0u64..1000, bump in 0.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x = grid_series(6, 0..=4, |_, _, _| 0.0);
            for s in &mut x.sites {
                for v in &mut s.values {
                    let u: f64 = rng.random();
                    *v = if u < 0.2 { None } else { Some(rng.random::<f64>() * 5.0 - 1.0) };
                }
            }
            let y = response(&[Point::new(0.3, 0.2)], &[4.0]);
            let cfg = BufferConfig::new(5.0, 2.0);
            let idx = build_index(&y, &x, cfg).unwrap();
            prop_assume!(idx.observations[0].valid);
            let k = KernelSpec::normalize(5.0, 2.0, 1.5, 0.7).unwrap();
            let vals: Vec<f64> = idx.neighbors(0).map(|n| n.value).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let wr = predictor_at(&idx, &k, PredictorMode::Renormalized, 0).unwrap();
            prop_assert!(wr >= lo - 1e-12 && wr <= hi + 1e-12);

            let raw = predictor_at(&idx, &k, PredictorMode::Raw, 0).unwrap();
            let mut x2 = x.clone();
            for s in &mut x2.sites {
                for v in s.values.iter_mut().flatten() {
                    *v += bump * rng.random::<f64>();
                }
            }
            let idx2 = build_index(&y, &x2, cfg).unwrap();
            let raw2 = predictor_at(&idx2, &k, PredictorMode::Raw, 0).unwrap();
            prop_assert!(raw2 >= raw - 1e-12);
        }
    }
}
