//! Autodiff-free geometric kernels over 3-D point sets.
//!
//! Everything here is a pure function of its inputs. Neighbour search is a
//! brute-force scan with an explicit `(distance, index)` ordering so that
//! results are reproducible bit for bit and comparable against oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid_arg, invalid_data, Result};

pub type Point3 = [f64; 3];

#[inline]
pub fn dist(a: &Point3, b: &Point3) -> f64 {
    dist2(a, b).sqrt()
}

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn norm(a: &Point3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// An ordered, non-empty set of finite 3-D points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return invalid_arg("point cloud must contain at least one point");
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return invalid_data(format!("non-finite coordinate at point {i}"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.count()) {
            return invalid_arg(format!("index {bad} out of range for {} points", self.count()));
        }
        Self::new(indices.iter().map(|&i| self.points[i]).collect())
    }

    /// Row-major `count × 3` copy of the coordinates.
    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if !values.len().is_multiple_of(3) {
            return invalid_arg(format!("flat coordinate buffer of length {} is not a multiple of 3", values.len()));
        }
        Self::new(values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn centroid(&self) -> Point3 {
        let n = self.count() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        c.map(|v| v / n)
    }

    pub fn concat(&self, other: &PointCloud) -> PointCloud {
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        PointCloud { points }
    }
}

/// k nearest reference points for each query point, ascending by distance.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex {
    k: usize,
    ids: Vec<usize>,
    dist: Vec<f64>,
}

impl NeighborIndex {
    /// Builds an index from raw rows. Used by callers that hold neighbour
    /// rows computed elsewhere (and by tests that permute rows).
    pub fn from_rows(k: usize, ids: Vec<usize>, dist: Vec<f64>) -> Result<Self> {
        if k == 0 || ids.len() != dist.len() || !ids.len().is_multiple_of(k) {
            return invalid_arg("neighbor rows must be a non-empty multiple of k");
        }
        Ok(Self { k, ids, dist })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_query(&self) -> usize {
        self.ids.len() / self.k
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn distances(&self) -> &[f64] {
        &self.dist
    }

    pub fn row_ids(&self, q: usize) -> &[usize] {
        &self.ids[q * self.k..(q + 1) * self.k]
    }

    pub fn row_dist(&self, q: usize) -> &[f64] {
        &self.dist[q * self.k..(q + 1) * self.k]
    }
}

pub fn knn(query: &PointCloud, reference: &PointCloud, k: usize) -> Result<NeighborIndex> {
    if k == 0 || k > reference.count() {
        return invalid_arg(format!("k = {k} must lie in 1..={}", reference.count()));
    }
    let mut ids = Vec::with_capacity(query.count() * k);
    let mut dists = Vec::with_capacity(query.count() * k);
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(reference.count());
    let by_dist_then_index =
        |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    for q in query.points() {
        scratch.clear();
        scratch.extend(reference.points().iter().enumerate().map(|(i, r)| (dist(q, r), i)));
        if k < scratch.len() {
            scratch.select_nth_unstable_by(k - 1, by_dist_then_index);
            scratch.truncate(k);
        }
        scratch.sort_unstable_by(by_dist_then_index);
        for &(d, i) in &scratch {
            ids.push(i);
            dists.push(d);
        }
    }
    Ok(NeighborIndex { k, ids, dist: dists })
}

/// Farthest point sampling with a seeded uniform start index.
pub fn farthest_point_sample(cloud: &PointCloud, m: usize, seed: u64) -> Result<Vec<usize>> {
    if m > cloud.count() {
        return invalid_arg(format!("cannot sample {m} of {} points", cloud.count()));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let start = ChaCha8Rng::seed_from_u64(seed).random_range(0..cloud.count());
    farthest_point_sample_from(cloud, m, &[start])
}

/// Farthest point sampling that treats `prefix` as already selected; the
/// returned list starts with `prefix` and is extended greedily to `m`
/// entries.
pub fn farthest_point_sample_from(cloud: &PointCloud, m: usize, prefix: &[usize]) -> Result<Vec<usize>> {
    let n = cloud.count();
    if m > n {
        return invalid_arg(format!("cannot sample {m} of {n} points"));
    }
    if prefix.len() > m {
        return invalid_arg("prefix is longer than the requested sample");
    }
    let mut selected = vec![false; n];
    for &i in prefix {
        if i >= n || selected[i] {
            return invalid_arg(format!("prefix index {i} is out of range or repeated"));
        }
        selected[i] = true;
    }
    let pts = cloud.points();
    let mut min_d2 = vec![f64::INFINITY; n];
    for &s in prefix {
        for (j, d) in min_d2.iter_mut().enumerate() {
            *d = d.min(dist2(&pts[s], &pts[j]));
        }
    }
    let mut out = prefix.to_vec();
    while out.len() < m {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for j in 0..n {
            if !selected[j] && min_d2[j] > best_d {
                best = j;
                best_d = min_d2[j];
            }
        }
        selected[best] = true;
        out.push(best);
        let p = pts[best];
        for (j, d) in min_d2.iter_mut().enumerate() {
            *d = d.min(dist2(&p, &pts[j]));
        }
    }
    Ok(out)
}

/// Parameters of a centring and isotropic scaling, kept for inversion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub centroid: Point3,
    pub scale: f64,
}

impl Normalization {
    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        let points = cloud
            .points()
            .iter()
            .map(|p| std::array::from_fn(|a| (p[a] - self.centroid[a]) / self.scale))
            .collect();
        PointCloud { points }
    }

    pub fn invert(&self, cloud: &PointCloud) -> PointCloud {
        let points = cloud
            .points()
            .iter()
            .map(|p| std::array::from_fn(|a| p[a] * self.scale + self.centroid[a]))
            .collect();
        PointCloud { points }
    }
}

pub fn normalize_unit_sphere(cloud: &PointCloud) -> (PointCloud, Normalization) {
    let centroid = cloud.centroid();
    let scale = cloud
        .points()
        .iter()
        .map(|p| dist(p, &centroid))
        .fold(0.0, f64::max);
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let params = Normalization { centroid, scale };
    (params.apply(cloud), params)
}

/// Keeps the `ceil(keep_fraction * count)` points with the smallest
/// projection onto `view_dir`, preserving their original order.
pub fn crop_occlusion(cloud: &PointCloud, view_dir: Point3, keep_fraction: f64) -> Result<PointCloud> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return invalid_arg(format!("keep_fraction {keep_fraction} outside (0, 1]"));
    }
    let len = norm(&view_dir);
    if !(len > 0.0) || !len.is_finite() {
        return invalid_arg("view direction must have non-zero finite norm");
    }
    let dir = view_dir.map(|c| c / len);
    let n = cloud.count();
    let keep = ((keep_fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<(f64, usize)> = cloud
        .points()
        .iter()
        .enumerate()
        .map(|(i, p)| (p[0] * dir[0] + p[1] * dir[1] + p[2] * dir[2], i))
        .collect();
    order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut kept: Vec<usize> = order[..keep].iter().map(|&(_, i)| i).collect();
    kept.sort_unstable();
    cloud.select(&kept)
}
