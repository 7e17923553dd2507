//! Point clouds, exact uniform-grid radius search and farthest-point sampling.

use std::collections::HashMap;

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// N points with optional per-point input features and integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    coords: Vec<Vec3>,
    features: Option<Array2<f64>>,
    labels: Option<Vec<u16>>,
}

impl PointCloud {
    pub fn new(coords: Vec<Vec3>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(i) = coords.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidCloud(format!("point {i} has a non-finite coordinate")));
        }
        Ok(PointCloud {
            coords,
            features: None,
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_features(mut self, features: Array2<f64>) -> Result<Self> {
        if features.nrows() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: features.nrows(),
            });
        }
        self.features = Some(features);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Vec3] {
        &self.coords
    }

    pub fn features(&self) -> Option<&Array2<f64>> {
        self.features.as_ref()
    }

    pub fn labels(&self) -> Option<&[u16]> {
        self.labels.as_deref()
    }

    /// Width of the input feature block (0 when absent).
    pub fn feature_dim(&self) -> usize {
        self.features.as_ref().map_or(0, |f| f.ncols())
    }

    /// Translated copy; features and labels are carried over.
    pub fn translated(&self, t: Vec3) -> PointCloud {
        PointCloud {
            coords: self.coords.iter().map(|&p| p + t).collect(),
            features: self.features.clone(),
            labels: self.labels.clone(),
        }
    }

    /// Sub-cloud made of the given point indices, in that order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
            features: self.features.as_ref().map(|f| f.select(ndarray::Axis(0), indices)),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn centroid(&self) -> Vec3 {
        let sum = self.coords.iter().fold(Vec3::ZERO, |acc, &p| acc + p);
        sum * (1.0 / self.len() as f64)
    }
}

/// Radii `base · factor^s` for `s = 0..num_scales`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleSchedule {
    pub base_radius: f64,
    pub factor: f64,
    pub num_scales: usize,
}

impl Default for ScaleSchedule {
    fn default() -> Self {
        ScaleSchedule {
            base_radius: 0.4,
            factor: 2.0,
            num_scales: 3,
        }
    }
}

impl ScaleSchedule {
    pub fn new(base_radius: f64, factor: f64, num_scales: usize) -> Result<Self> {
        let s = ScaleSchedule {
            base_radius,
            factor,
            num_scales,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_radius > 0.0 && self.base_radius.is_finite()) {
            return Err(Error::NonPositiveRadius(self.base_radius));
        }
        if self.num_scales == 0 {
            return Err(Error::Config("num_scales must be at least 1".into()));
        }
        if self.num_scales > 1 && !(self.factor > 1.0 && self.factor.is_finite()) {
            return Err(Error::Config(format!(
                "scale factor must be > 1 for increasing radii, got {}",
                self.factor
            )));
        }
        Ok(())
    }

    pub fn radius(&self, scale: usize) -> f64 {
        self.base_radius * self.factor.powi(scale as i32)
    }

    pub fn radii(&self) -> Vec<f64> {
        (0..self.num_scales).map(|s| self.radius(s)).collect()
    }

    pub fn max_radius(&self) -> f64 {
        self.radius(self.num_scales - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapMode {
    /// Keep the `max` nearest neighbors (ties by index).
    Closest,
    /// Keep `max` neighbors evenly spaced through the ascending index list.
    Strided,
}

/// Optional limit on neighborhood cardinality, applied per scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeighborCap {
    pub max: usize,
    pub mode: CapMode,
}

type CellKey = (i64, i64, i64);

/// Immutable uniform grid over a cloud's coordinates.
#[derive(Debug, Clone)]
pub struct NeighborhoodIndex<'a> {
    points: &'a [Vec3],
    cell_size: f64,
    /// Point indices grouped by cell, ascending within each cell.
    order: Vec<u32>,
    cells: HashMap<CellKey, (u32, u32)>,
}

fn cell_of(p: Vec3, inv: f64) -> CellKey {
    (
        (p.x * inv).floor() as i64,
        (p.y * inv).floor() as i64,
        (p.z * inv).floor() as i64,
    )
}

pub fn build_index(cloud: &PointCloud, cell_size: f64) -> Result<NeighborhoodIndex<'_>> {
    NeighborhoodIndex::new(cloud.coords(), cell_size)
}

impl<'a> NeighborhoodIndex<'a> {
    pub fn new(points: &'a [Vec3], cell_size: f64) -> Result<Self> {
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::NonPositiveCellSize(cell_size));
        }
        let inv = 1.0 / cell_size;
        let mut keyed: Vec<(CellKey, u32)> = points
            .iter()
            .enumerate()
            .map(|(i, &p)| (cell_of(p, inv), i as u32))
            .collect();
        keyed.sort_unstable();
        let mut cells = HashMap::new();
        let mut order = Vec::with_capacity(points.len());
        let mut start = 0usize;
        while start < keyed.len() {
            let key = keyed[start].0;
            let mut end = start;
            while end < keyed.len() && keyed[end].0 == key {
                order.push(keyed[end].1);
                end += 1;
            }
            cells.insert(key, (start as u32, end as u32));
            start = end;
        }
        Ok(NeighborhoodIndex {
            points,
            cell_size,
            order,
            cells,
        })
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &'a [Vec3] {
        self.points
    }

    pub fn occupied_cells(&self) -> usize {
        self.cells.len()
    }

    /// Visits every point within `radius` of `query` together with its squared
    /// distance, in no particular order.
    fn for_each_within(&self, query: Vec3, radius: f64, mut f: impl FnMut(u32, f64)) {
        let inv = 1.0 / self.cell_size;
        let r2 = radius * radius;
        let lo = cell_of(query - Vec3::new(radius, radius, radius), inv);
        let hi = cell_of(query + Vec3::new(radius, radius, radius), inv);
        for cx in lo.0..=hi.0 {
            for cy in lo.1..=hi.1 {
                for cz in lo.2..=hi.2 {
                    if let Some(&(s, e)) = self.cells.get(&(cx, cy, cz)) {
                        for &i in &self.order[s as usize..e as usize] {
                            let d2 = self.points[i as usize].distance_squared(query);
                            if d2 <= r2 {
                                f(i, d2);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Indices with `‖p − query‖ ≤ radius`, ascending.
    pub fn radius_neighbors(&self, query: Vec3, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_within(query, radius, |i, _| out.push(i as usize));
        out.sort_unstable();
        out
    }

    /// Nested neighbor lists for one query at every radius in `radii`
    /// (ascending), written as `(index, squared distance)` pairs sorted by
    /// index into `scratch`, then split per scale into `out`.
    pub(crate) fn multi_scale_into(
        &self,
        query: Vec3,
        radii: &[f64],
        cap: Option<NeighborCap>,
        scratch: &mut Vec<(u32, f64)>,
        out: &mut [Vec<u32>],
    ) {
        scratch.clear();
        let rmax = *radii.last().expect("at least one radius");
        self.for_each_within(query, rmax, |i, d2| scratch.push((i, d2)));
        scratch.sort_unstable_by_key(|&(i, _)| i);
        for (list, &r) in out.iter_mut().zip(radii) {
            let r2 = r * r;
            list.clear();
            list.extend(scratch.iter().filter(|(_, d2)| *d2 <= r2).map(|&(i, _)| i));
            if let Some(cap) = cap {
                apply_cap(list, cap, |i| self.points[i as usize].distance_squared(query));
            }
        }
    }
}

fn apply_cap(list: &mut Vec<u32>, cap: NeighborCap, dist2: impl Fn(u32) -> f64) {
    let n = list.len();
    if n <= cap.max || cap.max == 0 {
        return;
    }
    match cap.mode {
        CapMode::Closest => {
            let mut keyed: Vec<(f64, u32)> = list.iter().map(|&i| (dist2(i), i)).collect();
            keyed.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            keyed.truncate(cap.max);
            list.clear();
            list.extend(keyed.into_iter().map(|(_, i)| i));
            list.sort_unstable();
        }
        CapMode::Strided => {
            let picked: Vec<u32> = (0..cap.max).map(|k| list[k * n / cap.max]).collect();
            *list = picked;
        }
    }
}

pub fn radius_neighbors(index: &NeighborhoodIndex<'_>, query: Vec3, radius: f64) -> Vec<usize> {
    index.radius_neighbors(query, radius)
}

/// Neighbor lists for every query at every scale, stored compactly.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleNeighborhoods {
    num_queries: usize,
    num_scales: usize,
    /// `offsets[s][q]..offsets[s][q + 1]` indexes `indices[s]`.
    offsets: Vec<Vec<usize>>,
    indices: Vec<Vec<u32>>,
}

impl MultiScaleNeighborhoods {
    pub fn num_queries(&self) -> usize {
        self.num_queries
    }

    pub fn num_scales(&self) -> usize {
        self.num_scales
    }

    pub fn get(&self, query: usize, scale: usize) -> &[u32] {
        let off = &self.offsets[scale];
        &self.indices[scale][off[query]..off[query + 1]]
    }

    /// Total stored neighbor entries over all queries and scales.
    pub fn total_entries(&self) -> usize {
        self.indices.iter().map(Vec::len).sum()
    }

    fn from_lists(lists: Vec<Vec<Vec<u32>>>, num_scales: usize) -> Self {
        let num_queries = lists.len();
        let mut offsets = vec![Vec::with_capacity(num_queries + 1); num_scales];
        let mut indices = vec![Vec::new(); num_scales];
        for s in 0..num_scales {
            offsets[s].push(0);
            for per_query in &lists {
                indices[s].extend_from_slice(&per_query[s]);
                offsets[s].push(indices[s].len());
            }
        }
        MultiScaleNeighborhoods {
            num_queries,
            num_scales,
            offsets,
            indices,
        }
    }
}

pub fn multi_scale_neighborhoods(
    index: &NeighborhoodIndex<'_>,
    queries: &[Vec3],
    schedule: &ScaleSchedule,
) -> MultiScaleNeighborhoods {
    multi_scale_neighborhoods_capped(index, queries, schedule, None)
}

pub fn multi_scale_neighborhoods_capped(
    index: &NeighborhoodIndex<'_>,
    queries: &[Vec3],
    schedule: &ScaleSchedule,
    cap: Option<NeighborCap>,
) -> MultiScaleNeighborhoods {
    let radii = schedule.radii();
    let s = radii.len();
    let lists: Vec<Vec<Vec<u32>>> = queries
        .par_iter()
        .map_init(Vec::new, |scratch, &q| {
            let mut out = vec![Vec::new(); s];
            index.multi_scale_into(q, &radii, cap, scratch, &mut out);
            out
        })
        .collect();
    MultiScaleNeighborhoods::from_lists(lists, s)
}

/// Greedy farthest-point sampling from `seed_index`; ties go to the smallest
/// index. Returns indices in selection order.
pub fn farthest_point_sample(cloud: &PointCloud, k: usize, seed_index: usize) -> Result<Vec<usize>> {
    let (order, _) = farthest_point_sample_with_radii(cloud.coords(), k, seed_index)?;
    Ok(order)
}

/// FPS that also reports, for every selection, its squared distance to the
/// previously selected set at the moment it was picked (`+∞` for the seed).
pub fn farthest_point_sample_with_radii(
    points: &[Vec3],
    k: usize,
    seed_index: usize,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::KOutOfRange { k, n });
    }
    if seed_index >= n {
        return Err(Error::SeedOutOfRange { seed: seed_index, n });
    }
    const CHUNK: usize = 4096;
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut order = Vec::with_capacity(k);
    let mut picked_d2 = Vec::with_capacity(k);
    let mut current = seed_index;
    order.push(current);
    picked_d2.push(f64::INFINITY);
    while order.len() < k {
        let c = points[current];
        // (distance, index) of the best candidate per chunk; reduced in chunk order
        let (best_d2, best_i) = min_d2
            .par_chunks_mut(CHUNK)
            .enumerate()
            .map(|(ci, chunk)| {
                let base = ci * CHUNK;
                let mut best = (f64::NEG_INFINITY, usize::MAX);
                for (j, d) in chunk.iter_mut().enumerate() {
                    let nd = points[base + j].distance_squared(c);
                    if nd < *d {
                        *d = nd;
                    }
                    if *d > best.0 {
                        best = (*d, base + j);
                    }
                }
                best
            })
            .reduce(
                || (f64::NEG_INFINITY, usize::MAX),
                |a, b| {
                    if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
                        b
                    } else {
                        a
                    }
                },
            );
        current = best_i;
        order.push(current);
        picked_d2.push(best_d2);
    }
    Ok((order, picked_d2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.iter().map(|&a| Vec3::from_array(a)).collect()).unwrap()
    }

    fn brute(points: &[Vec3], q: Vec3, r: f64) -> Vec<usize> {
        (0..points.len()).filter(|&i| points[i].distance_squared(q) <= r * r).collect()
    }

    fn random_points(n: usize, extent: f64, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vec3::new(rng.gen_range(0.0..extent), rng.gen_range(0.0..extent), rng.gen_range(0.0..extent)))
            .collect()
    }

    #[test]
    fn cloud_rejects_empty_and_mismatched_rows() {
        assert!(matches!(PointCloud::new(vec![]), Err(Error::EmptyCloud)));
        let c = cloud(&[[0.0, 0.0, 0.0]]);
        assert!(c.clone().with_labels(vec![0, 1]).is_err());
        assert!(c.with_features(Array2::zeros((2, 1))).is_err());
        assert!(PointCloud::new(vec![Vec3::new(f64::NAN, 0.0, 0.0)]).is_err());
    }

    #[test]
    fn single_point_index() {
        let c = cloud(&[[1.0, 2.0, 3.0]]);
        let idx = build_index(&c, 0.5).unwrap();
        assert_eq!(idx.occupied_cells(), 1);
        assert_eq!(idx.radius_neighbors(Vec3::new(1.0, 2.0, 3.0), 0.1), vec![0]);
    }

    #[test]
    fn coincident_points_share_a_cell() {
        let c = cloud(&[[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]]);
        let idx = build_index(&c, 1.0).unwrap();
        assert_eq!(idx.occupied_cells(), 1);
        assert_eq!(idx.radius_neighbors(Vec3::new(1.0, 1.0, 1.0), 0.01), vec![0, 1]);
    }

    #[test]
    fn rejects_bad_cell_size() {
        let c = cloud(&[[0.0, 0.0, 0.0]]);
        assert!(matches!(build_index(&c, 0.0), Err(Error::NonPositiveCellSize(_))));
        assert!(build_index(&c, -1.0).is_err());
    }

    #[test]
    fn small_radius_query() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        let idx = build_index(&c, 1.0).unwrap();
        assert_eq!(idx.radius_neighbors(Vec3::ZERO, 1.1), vec![0, 1]);
        assert!(idx.radius_neighbors(Vec3::new(50.0, 50.0, 50.0), 0.5).is_empty());
    }

    #[test]
    fn grid_matches_brute_force_for_radii_larger_and_smaller_than_cells() {
        let pts = random_points(1000, 5.0, 3);
        let idx = NeighborhoodIndex::new(&pts, 0.7).unwrap();
        let queries = random_points(50, 5.0, 4);
        for q in queries {
            for r in [0.1, 0.5, 0.7, 1.9, 4.0] {
                assert_eq!(idx.radius_neighbors(q, r), brute(&pts, q, r));
            }
        }
    }

    #[test]
    fn lattice_scale_counts() {
        let mut pts = Vec::new();
        for x in -1..=1 {
            for y in -1..=1 {
                for z in -1..=1 {
                    pts.push([x as f64, y as f64, z as f64]);
                }
            }
        }
        let c = cloud(&pts);
        let schedule = ScaleSchedule::new(1.1, 2.0, 2).unwrap();
        let idx = build_index(&c, schedule.max_radius()).unwrap();
        let nb = multi_scale_neighborhoods(&idx, &[Vec3::ZERO], &schedule);
        assert_eq!(nb.get(0, 0).len(), 7);
        assert_eq!(nb.get(0, 1).len(), 27);
    }

    #[test]
    fn single_scale_reduces_to_radius_query() {
        let pts = random_points(300, 3.0, 9);
        let c = PointCloud::new(pts.clone()).unwrap();
        let idx = build_index(&c, 0.5).unwrap();
        let schedule = ScaleSchedule::new(0.5, 2.0, 1).unwrap();
        let nb = multi_scale_neighborhoods(&idx, &pts, &schedule);
        for (q, &p) in pts.iter().enumerate() {
            let got: Vec<usize> = nb.get(q, 0).iter().map(|&i| i as usize).collect();
            assert_eq!(got, idx.radius_neighbors(p, 0.5));
        }
    }

    #[test]
    fn caps_limit_cardinality() {
        let pts = random_points(500, 1.0, 5);
        let idx = NeighborhoodIndex::new(&pts, 1.0).unwrap();
        let schedule = ScaleSchedule::new(0.5, 2.0, 2).unwrap();
        let q = Vec3::new(0.5, 0.5, 0.5);
        for mode in [CapMode::Closest, CapMode::Strided] {
            let cap = NeighborCap { max: 10, mode };
            let nb = multi_scale_neighborhoods_capped(&idx, &[q], &schedule, Some(cap));
            for s in 0..2 {
                let l = nb.get(0, s);
                assert_eq!(l.len(), 10);
                assert!(l.windows(2).all(|w| w[0] < w[1]));
            }
        }
        let cap = NeighborCap { max: 5, mode: CapMode::Closest };
        let nb = multi_scale_neighborhoods_capped(&idx, &[q], &schedule, Some(cap));
        let mut by_dist: Vec<usize> = (0..pts.len()).collect();
        by_dist.sort_by(|&a, &b| pts[a].distance_squared(q).total_cmp(&pts[b].distance_squared(q)));
        let mut expected: Vec<u32> = by_dist[..5].iter().map(|&i| i as u32).collect();
        expected.sort_unstable();
        assert_eq!(nb.get(0, 1), expected.as_slice());
    }

    #[test]
    fn fps_examples() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        assert_eq!(farthest_point_sample(&c, 2, 0).unwrap(), vec![0, 2]);
        assert_eq!(farthest_point_sample(&c, 3, 0).unwrap(), vec![0, 2, 1]);
        assert!(matches!(farthest_point_sample(&c, 4, 0), Err(Error::KOutOfRange { .. })));
        assert!(matches!(farthest_point_sample(&c, 0, 0), Err(Error::KOutOfRange { .. })));
        assert!(farthest_point_sample(&c, 1, 3).is_err());
    }

    #[test]
    fn fps_ties_prefer_smallest_index() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert_eq!(farthest_point_sample(&c, 2, 0).unwrap(), vec![0, 1]);
    }

    #[test]
    fn fps_full_selection_is_a_permutation() {
        let pts = random_points(200, 1.0, 11);
        let c = PointCloud::new(pts).unwrap();
        let mut order = farthest_point_sample(&c, 200, 0).unwrap();
        order.sort_unstable();
        assert_eq!(order, (0..200).collect::<Vec<_>>());
    }
}
