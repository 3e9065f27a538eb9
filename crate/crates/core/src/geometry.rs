//! Voronoi tessellation of a disk buffer and irregular temporal increments.
//!
//! Each cell is built as the intersection of bisector half-planes, clipped
//! to a square that contains the disk. The area of `cell ∩ disk` is then
//! computed exactly by summing signed triangle/circular-sector pieces over the
//! polygon edges, so the boundary arc is never approximated by segments.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Point;

/// Sites closer than this (km) are considered coincident.
pub const COINCIDENT_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("empty buffer: no sites inside the disk")]
    EmptyBuffer,
    #[error("empty window: no observation inside the time window")]
    EmptyWindow,
    #[error("site {index} lies outside the disk (distance {distance} > radius {radius})")]
    SiteOutsideDisk {
        index: usize,
        distance: f64,
        radius: f64,
    },
    #[error("sites {first} and {second} coincide")]
    CoincidentSites { first: usize, second: usize },
    #[error("radius must be positive and finite, got {0}")]
    InvalidRadius(f64),
    #[error("time {time} lies outside the window [{start}, {end}]")]
    TimeOutsideWindow { time: f64, start: f64, end: f64 },
    #[error("observation times must be strictly increasing (at {time})")]
    TimesNotIncreasing { time: f64 },
}

/// Voronoi cells of `sites` restricted to the disk `B_r(center)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiskTessellation {
    pub center: Point,
    pub radius: f64,
    pub sites: Vec<Point>,
    pub cell_area: Vec<f64>,
}

impl DiskTessellation {
    pub fn total_area(&self) -> f64 {
        self.cell_area.iter().sum()
    }
}

/// Tessellates the disk of radius `r` around `center` by nearest-site
/// membership and returns the area of every cell.
pub fn voronoi_disk(center: Point, r: f64, sites: &[Point]) -> Result<DiskTessellation, GeometryError> {
    let cells = CellBuilder::new(center, r, sites)?;
    let cell_area = (0..sites.len())
        .map(|k| cells.cell(k).map(|poly| polygon_disk_area(&poly, center, r)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DiskTessellation {
        center,
        radius: r,
        sites: sites.to_vec(),
        cell_area,
    })
}

/// Polygonal outlines of the clipped cells, with the disk boundary replaced
/// by a circumscribed regular polygon of `arc_segments` sides. For plotting.
pub fn voronoi_disk_rings(
    center: Point,
    r: f64,
    sites: &[Point],
    arc_segments: usize,
) -> Result<Vec<Vec<Point>>, GeometryError> {
    let cells = CellBuilder::new(center, r, sites)?;
    let n = arc_segments.max(8);
    (0..sites.len())
        .map(|k| {
            let mut poly = cells.cell(k)?;
            for j in 0..n {
                let th = 2.0 * std::f64::consts::PI * j as f64 / n as f64;
                let normal = Point::new(th.cos(), th.sin());
                let offset = normal.x * center.x + normal.y * center.y + r;
                poly = clip_halfplane(&poly, normal, offset);
            }
            Ok(poly)
        })
        .collect()
}

struct CellBuilder<'a> {
    center: Point,
    r: f64,
    sites: &'a [Point],
    grid: usize,
    cell_size: f64,
    origin: Point,
    buckets: Vec<Vec<u32>>,
}

impl<'a> CellBuilder<'a> {
    fn new(center: Point, r: f64, sites: &'a [Point]) -> Result<Self, GeometryError> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(GeometryError::InvalidRadius(r));
        }
        if sites.is_empty() {
            return Err(GeometryError::EmptyBuffer);
        }
        let tol = r * 1e-12;
        for (index, s) in sites.iter().enumerate() {
            let distance = s.dist(&center);
            if !(distance <= r + tol) {
                return Err(GeometryError::SiteOutsideDisk {
                    index,
                    distance,
                    radius: r,
                });
            }
        }
        let grid = ((sites.len() as f64 / 2.0).sqrt().ceil() as usize).max(1);
        let cell_size = 2.0 * r / grid as f64;
        let origin = Point::new(center.x - r, center.y - r);
        let mut buckets = vec![Vec::new(); grid * grid];
        let mut this = Self {
            center,
            r,
            sites,
            grid,
            cell_size,
            origin,
            buckets: Vec::new(),
        };
        for (k, s) in sites.iter().enumerate() {
            let (bx, by) = this.bucket_of(s);
            buckets[by * grid + bx].push(k as u32);
        }
        this.buckets = buckets;
        Ok(this)
    }

    fn bucket_of(&self, p: &Point) -> (usize, usize) {
        let clamp = |v: f64| -> usize {
            let i = (v / self.cell_size).floor();
            if i < 0.0 {
                0
            } else {
                (i as usize).min(self.grid - 1)
            }
        };
        (clamp(p.x - self.origin.x), clamp(p.y - self.origin.y))
    }

    /// Convex polygon of the Voronoi cell of site `k`, clipped to the square
    /// bounding the disk.
    fn cell(&self, k: usize) -> Result<Vec<Point>, GeometryError> {
        let c = self.center;
        let r = self.r;
        let zk = self.sites[k];
        let mut poly = vec![
            Point::new(c.x - r, c.y - r),
            Point::new(c.x + r, c.y - r),
            Point::new(c.x + r, c.y + r),
            Point::new(c.x - r, c.y + r),
        ];
        let reach_cap = zk.dist(&c) + r;
        let (bx, by) = self.bucket_of(&zk);
        let g = self.grid as isize;
        for ring in 0..=self.grid as isize {
            if ring >= 1 {
                let reach = poly
                    .iter()
                    .map(|v| v.dist(&zk))
                    .fold(0.0_f64, f64::max)
                    .min(reach_cap);
                if (ring - 1) as f64 * self.cell_size > 2.0 * reach {
                    break;
                }
            }
            for dy in -ring..=ring {
                for dx in -ring..=ring {
                    if dx.abs().max(dy.abs()) != ring {
                        continue;
                    }
                    let (x, y) = (bx as isize + dx, by as isize + dy);
                    if x < 0 || y < 0 || x >= g || y >= g {
                        continue;
                    }
                    for &j in &self.buckets[(y * g + x) as usize] {
                        let j = j as usize;
                        if j == k {
                            continue;
                        }
                        let zj = self.sites[j];
                        if zj.dist(&zk) < COINCIDENT_TOL {
                            return Err(GeometryError::CoincidentSites {
                                first: k.min(j),
                                second: k.max(j),
                            });
                        }
                        // keep {x : (x - m)·(zj - zk) <= 0}
                        let normal = Point::new(zj.x - zk.x, zj.y - zk.y);
                        let mid = Point::new(0.5 * (zj.x + zk.x), 0.5 * (zj.y + zk.y));
                        let offset = normal.x * mid.x + normal.y * mid.y;
                        poly = clip_halfplane(&poly, normal, offset);
                        if poly.is_empty() {
                            return Ok(poly);
                        }
                    }
                }
            }
        }
        Ok(poly)
    }
}

/// Sutherland–Hodgman clip of a convex polygon against `normal·x <= offset`.
fn clip_halfplane(poly: &[Point], normal: Point, offset: f64) -> Vec<Point> {
    let side = |p: &Point| normal.x * p.x + normal.y * p.y - offset;
    let mut out = Vec::with_capacity(poly.len() + 1);
    let n = poly.len();
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        let sa = side(&a);
        let sb = side(&b);
        if sa <= 0.0 {
            out.push(a);
        }
        if (sa <= 0.0) != (sb <= 0.0) {
            let t = sa / (sa - sb);
            out.push(Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)));
        }
    }
    out
}

/// Exact area of a simple polygon (counter-clockwise or clockwise)
/// intersected with the disk `B_r(center)`.
pub fn polygon_disk_area(poly: &[Point], center: Point, r: f64) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        let a = Point::new(poly[i].x - center.x, poly[i].y - center.y);
        let b = Point::new(poly[(i + 1) % n].x - center.x, poly[(i + 1) % n].y - center.y);
        total += triangle_disk_area(a, b, r);
    }
    total.abs()
}

/// Signed area of triangle (origin, a, b) intersected with the disk of
/// radius `r` about the origin.
fn triangle_disk_area(a: Point, b: Point, r: f64) -> f64 {
    let d = Point::new(b.x - a.x, b.y - a.y);
    let qa = d.x * d.x + d.y * d.y;
    if qa == 0.0 {
        return 0.0;
    }
    let qb = 2.0 * (a.x * d.x + a.y * d.y);
    let qc = a.x * a.x + a.y * a.y - r * r;
    let mut cuts = [0.0, 1.0, 1.0, 1.0];
    let mut ncuts = 1;
    let disc = qb * qb - 4.0 * qa * qc;
    if disc <= 0.0 {
        // the line misses the open disk (or touches it): pure sector
        let cross = a.x * b.y - a.y * b.x;
        let dot = a.x * b.x + a.y * b.y;
        return 0.5 * r * r * cross.atan2(dot);
    }
    {
        let sq = disc.sqrt();
        // numerically stable roots
        let q = -0.5 * (qb + qb.signum() * sq);
        let (mut t1, mut t2) = if q != 0.0 { (q / qa, qc / q) } else { (0.0, 0.0) };
        if t1 > t2 {
            std::mem::swap(&mut t1, &mut t2);
        }
        for t in [t1, t2] {
            if t > 0.0 && t < 1.0 {
                cuts[ncuts] = t;
                ncuts += 1;
            }
        }
    }
    cuts[ncuts] = 1.0;
    ncuts += 1;
    let at = |t: f64| Point::new(a.x + t * d.x, a.y + t * d.y);
    let mut area = 0.0;
    for w in cuts[..ncuts].windows(2) {
        let (t0, t1) = (w[0], w[1]);
        if t1 <= t0 {
            continue;
        }
        let p = at(t0);
        let q = at(t1);
        let m = at(0.5 * (t0 + t1));
        let cross = p.x * q.y - p.y * q.x;
        if m.x * m.x + m.y * m.y <= r * r {
            area += 0.5 * cross;
        } else {
            let dot = p.x * q.x + p.y * q.y;
            area += 0.5 * r * r * cross.atan2(dot);
        }
    }
    area
}

/// Time stamps inside a trailing window together with the increment each one
/// represents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalIncrements {
    pub times: Vec<f64>,
    pub delta: Vec<f64>,
}

impl TemporalIncrements {
    pub fn span(&self) -> f64 {
        self.delta.iter().sum()
    }
}

/// Increments for observations in `[t_i - q, t_i]`.
///
/// Interior observations get `t_k - t_{k-1}`; the earliest one gets its
/// distance to the window edge, `t_1 - (t_i - q)`. An observation sitting
/// exactly on the lower edge would receive a zero increment and is dropped.
pub fn temporal_increments(t_i: f64, q: f64, obs_times: &[f64]) -> Result<TemporalIncrements, GeometryError> {
    let start = t_i - q;
    let mut prev = f64::NEG_INFINITY;
    for &t in obs_times {
        if !(t >= start && t <= t_i) {
            return Err(GeometryError::TimeOutsideWindow {
                time: t,
                start,
                end: t_i,
            });
        }
        if t <= prev {
            return Err(GeometryError::TimesNotIncreasing { time: t });
        }
        prev = t;
    }
    let mut times = Vec::with_capacity(obs_times.len());
    let mut delta = Vec::with_capacity(obs_times.len());
    let mut edge = start;
    for &t in obs_times {
        let d = t - edge;
        if d > 0.0 {
            times.push(t);
            delta.push(d);
        }
        edge = t;
    }
    if times.is_empty() {
        return Err(GeometryError::EmptyWindow);
    }
    Ok(TemporalIncrements { times, delta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    /// Stratified Monte Carlo membership oracle: jittered samples on an
    /// equal-area polar lattice, each assigned to its nearest site.
    fn mc_areas(center: Point, r: f64, sites: &[Point], n_rings: usize, n_sectors: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts = vec![0u64; sites.len()];
        let total = (n_rings * n_sectors) as u64;
        for i in 0..n_rings {
            for j in 0..n_sectors {
                let u: f64 = (i as f64 + rng.random::<f64>()) / n_rings as f64;
                let v: f64 = (j as f64 + rng.random::<f64>()) / n_sectors as f64;
                let rho = r * u.sqrt();
                let th = 2.0 * PI * v;
                let p = Point::new(center.x + rho * th.cos(), center.y + rho * th.sin());
                let mut best = 0;
                let mut bd = f64::INFINITY;
                for (k, s) in sites.iter().enumerate() {
                    let d = s.dist2(&p);
                    if d < bd {
                        bd = d;
                        best = k;
                    }
                }
                counts[best] += 1;
            }
        }
        counts
            .into_iter()
            .map(|c| PI * r * r * c as f64 / total as f64)
            .collect()
    }

    #[test]
    fn single_site_gets_whole_disk() {
        let t = voronoi_disk(Point::new(3.0, -2.0), 10.0, &[Point::new(5.0, 1.0)]).unwrap();
        assert!(rel(t.cell_area[0], 314.159_265_358_979) < 1e-12);
    }

    #[test]
    fn symmetric_pair_halves_disk() {
        let sites = [Point::new(-1.0, 0.0), Point::new(1.0, 0.0)];
        let t = voronoi_disk(Point::new(0.0, 0.0), 10.0, &sites).unwrap();
        for a in &t.cell_area {
            assert!(rel(*a, 50.0 * PI) < 1e-12, "{a}");
        }
    }

    #[test]
    fn five_random_sites_match_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let center = Point::new(0.0, 0.0);
        let sites: Vec<Point> = (0..5)
            .map(|_| {
                let rho = 10.0 * rng.random::<f64>().sqrt();
                let th = 2.0 * PI * rng.random::<f64>();
                Point::new(rho * th.cos(), rho * th.sin())
            })
            .collect();
        let t = voronoi_disk(center, 10.0, &sites).unwrap();
        // 10^7 stratified samples
        let mc = mc_areas(center, 10.0, &sites, 2000, 5000, 11);
        for (a, m) in t.cell_area.iter().zip(&mc) {
            assert!(rel(*m, *a) < 1e-3, "exact {a} vs mc {m}");
        }
    }

    #[test]
    fn errors() {
        let c = Point::new(0.0, 0.0);
        assert_eq!(voronoi_disk(c, 1.0, &[]).unwrap_err(), GeometryError::EmptyBuffer);
        assert!(matches!(
            voronoi_disk(c, 1.0, &[Point::new(2.0, 0.0)]).unwrap_err(),
            GeometryError::SiteOutsideDisk { index: 0, .. }
        ));
        assert!(matches!(
            voronoi_disk(c, 1.0, &[Point::new(0.1, 0.0), Point::new(0.1, 1e-12)]).unwrap_err(),
            GeometryError::CoincidentSites { first: 0, second: 1 }
        ));
        assert!(matches!(voronoi_disk(c, 0.0, &[c]).unwrap_err(), GeometryError::InvalidRadius(_)));
    }

    #[test]
    fn collinear_and_boundary_sites() {
        let c = Point::new(0.0, 0.0);
        let sites: Vec<Point> = (0..9).map(|i| Point::new(-8.0 + 2.0 * i as f64, 0.0)).collect();
        let t = voronoi_disk(c, 10.0, &sites).unwrap();
        assert!(rel(t.total_area(), 100.0 * PI) < 1e-12);
        assert!(t.cell_area.iter().all(|&a| a > 0.0));
        let on_edge = [Point::new(10.0, 0.0), Point::new(-10.0, 0.0), Point::new(0.0, 10.0)];
        let t = voronoi_disk(c, 10.0, &on_edge).unwrap();
        assert!(rel(t.total_area(), 100.0 * PI) < 1e-12);
    }

    #[test]
    fn regular_grid_interior_cells_are_unit_squares() {
        let c = Point::new(0.3, -0.2);
        let mut sites = Vec::new();
        for i in -10..=10 {
            for j in -10..=10 {
                let p = Point::new(i as f64, j as f64);
                if p.dist(&c) <= 10.0 {
                    sites.push(p);
                }
            }
        }
        let t = voronoi_disk(c, 10.0, &sites).unwrap();
        for (s, a) in sites.iter().zip(&t.cell_area) {
            if s.dist(&c) < 8.5 {
                assert!((a - 1.0).abs() < 1e-12, "{s:?} {a}");
            }
        }
        assert!(rel(t.total_area(), 100.0 * PI) < 1e-12);
    }

    #[test]
    fn rings_cover_the_cells() {
        let sites = [Point::new(-1.0, 0.0), Point::new(1.0, 0.5)];
        let rings = voronoi_disk_rings(Point::new(0.0, 0.0), 5.0, &sites, 256).unwrap();
        let area: f64 = rings.iter().map(|p| polygon_disk_area(p, Point::new(0.0, 0.0), 100.0)).sum();
        assert!(rel(area, 25.0 * PI) < 1e-3);
    }

    #[test]
    fn increments_regular_daily() {
        let inc = temporal_increments(10.0, 5.0, &[6.0, 7.0, 8.0, 9.0, 10.0]).unwrap();
        assert_eq!(inc.delta, vec![1.0; 5]);
    }

    #[test]
    fn increments_irregular() {
        let inc = temporal_increments(10.0, 5.0, &[5.5, 8.0, 10.0]).unwrap();
        assert_eq!(inc.delta, vec![0.5, 2.5, 2.0]);
    }

    #[test]
    fn increments_single_at_window_end() {
        let inc = temporal_increments(4.0, 3.0, &[4.0]).unwrap();
        assert_eq!(inc.delta, vec![3.0]);
    }

    #[test]
    fn increments_lower_edge_dropped_and_errors() {
        let inc = temporal_increments(10.0, 5.0, &[5.0, 6.0, 10.0]).unwrap();
        assert_eq!(inc.times, vec![6.0, 10.0]);
        assert_eq!(inc.delta, vec![1.0, 4.0]);
        assert_eq!(temporal_increments(10.0, 5.0, &[]).unwrap_err(), GeometryError::EmptyWindow);
        assert_eq!(temporal_increments(10.0, 5.0, &[5.0]).unwrap_err(), GeometryError::EmptyWindow);
        assert!(matches!(
            temporal_increments(10.0, 5.0, &[4.0]).unwrap_err(),
            GeometryError::TimeOutsideWindow { .. }
        ));
        assert!(matches!(
            temporal_increments(10.0, 5.0, &[7.0, 7.0]).unwrap_err(),
            GeometryError::TimesNotIncreasing { .. }
        ));
    }

    fn random_sites(seed: u64, n: usize, center: Point, r: f64) -> Vec<Point> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let rho = r * rng.random::<f64>().sqrt();
                let th = 2.0 * PI * rng.random::<f64>();
                Point::new(center.x + rho * th.cos(), center.y + rho * th.sin())
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn area_is_conserved(seed in 0u64..10_000, n in 1usize..60, r in 0.5f64..30.0) {
            let c = Point::new(12.0, -7.0);
            let sites = random_sites(seed, n, c, r);
            let t = voronoi_disk(c, r, &sites).unwrap();
            prop_assert!(rel(t.total_area(), PI * r * r) < 1e-9);
            prop_assert!(t.cell_area.iter().all(|&a| a > 0.0));
        }

        #[test]
        fn permutation_permutes_areas(seed in 0u64..10_000, n in 2usize..30) {
            let c = Point::new(0.0, 0.0);
            let sites = random_sites(seed, n, c, 10.0);
            let t = voronoi_disk(c, 10.0, &sites).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.rotate_left(seed as usize % n);
            perm.swap(0, n - 1);
            let shuffled: Vec<Point> = perm.iter().map(|&i| sites[i]).collect();
            let u = voronoi_disk(c, 10.0, &shuffled).unwrap();
            for (j, &i) in perm.iter().enumerate() {
                prop_assert!((u.cell_area[j] - t.cell_area[i]).abs() <= 1e-9 * t.cell_area[i].max(1e-3));
            }
        }

        #[test]
        fn rigid_motion_invariance(seed in 0u64..10_000, n in 1usize..30, angle in 0.0f64..6.283, dx in -50.0f64..50.0) {
            let c = Point::new(0.0, 0.0);
            let sites = random_sites(seed, n, c, 10.0);
            let t = voronoi_disk(c, 10.0, &sites).unwrap();
            let (s, co) = angle.sin_cos();
            let mv = |p: &Point| Point::new(co * p.x - s * p.y + dx, s * p.x + co * p.y - 0.5 * dx);
            let moved: Vec<Point> = sites.iter().map(mv).collect();
            let u = voronoi_disk(mv(&c), 10.0, &moved).unwrap();
            for (a, b) in t.cell_area.iter().zip(&u.cell_area) {
                prop_assert!((a - b).abs() <= 1e-9 * 100.0 * PI);
            }
        }
    }
}
