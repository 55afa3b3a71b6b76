//! Chamfer objectives, the denoising loss, and evaluation metrics.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ChamferKind, Graph, Tensor, Var};
use crate::error::{invalid_arg, Result};
use crate::geom::{self, dist, dist2, Point3, PointCloud};

/// For every point of `src`, squared distance to its nearest point in `dst`.
fn nearest_d2(src: &[Point3], dst: &[Point3]) -> Vec<f64> {
    src.iter()
        .map(|s| dst.iter().map(|d| dist2(s, d)).fold(f64::INFINITY, f64::min))
        .collect()
}

fn check_non_empty(a: &[Point3], b: &[Point3]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return invalid_arg("metric on an empty point set");
    }
    Ok(())
}

fn mean(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    v.sum::<f64>() / n as f64
}

/// Mean nearest-neighbour Euclidean distance in both directions, summed.
pub fn chamfer_l1(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    chamfer_points(a.points(), b.points(), ChamferKind::L1)
}

/// As [`chamfer_l1`] with squared distances.
pub fn chamfer_l2(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    chamfer_points(a.points(), b.points(), ChamferKind::L2)
}

pub fn chamfer_points(a: &[Point3], b: &[Point3], kind: ChamferKind) -> Result<f64> {
    check_non_empty(a, b)?;
    let term = |d2: Vec<f64>| {
        let n = d2.len();
        match kind {
            ChamferKind::L1 => mean(d2.into_iter().map(f64::sqrt), n),
            ChamferKind::L2 => mean(d2.into_iter(), n),
        }
    };
    Ok(term(nearest_d2(a, b)) + term(nearest_d2(b, a)))
}

/// Diameter of the centroid-centred bounding sphere of `cloud`.
pub fn bounding_diameter(cloud: &PointCloud) -> f64 {
    let c = cloud.centroid();
    2.0 * cloud.points().iter().map(|p| dist(p, &c)).fold(0.0, f64::max)
}

/// F-Score at `threshold_fraction` of the ground truth's bounding-sphere
/// diameter.
pub fn f_score(pred: &PointCloud, gt: &PointCloud, threshold_fraction: f64) -> Result<f64> {
    if !(threshold_fraction > 0.0) {
        return invalid_arg("threshold fraction must be positive");
    }
    let t = threshold_fraction * bounding_diameter(gt);
    f_score_abs(pred, gt, t)
}

/// F-Score with an absolute distance threshold.
pub fn f_score_abs(pred: &PointCloud, gt: &PointCloud, threshold: f64) -> Result<f64> {
    let hits = |src: &PointCloud, dst: &PointCloud| {
        let n = nearest_d2(src.points(), dst.points()).iter().filter(|&&d| d.sqrt() <= threshold).count();
        n as f64 / src.count() as f64
    };
    let precision = hits(pred, gt);
    let recall = hits(gt, pred);
    Ok(if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 })
}

/// Mean distance from each input point to its nearest predicted point.
pub fn fidelity(partial: &PointCloud, pred: &PointCloud) -> Result<f64> {
    let d = nearest_d2(partial.points(), pred.points());
    Ok(mean(d.into_iter().map(f64::sqrt), partial.count()))
}

/// Smallest CD-ℓ2 from `pred` to any reference shape.
pub fn mmd(pred: &PointCloud, references: &[PointCloud]) -> Result<f64> {
    if references.is_empty() {
        return invalid_arg("mmd needs at least one reference shape");
    }
    references.iter().map(|r| chamfer_l2(pred, r)).try_fold(f64::INFINITY, |m, v| Ok(m.min(v?)))
}

/// One denoising query: a ground-truth centre, its perturbation and the
/// ground-truth patch around the clean centre.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseQuery {
    pub clean_center: Point3,
    pub noise: Point3,
    pub noisy_center: Point3,
    pub local_gt: PointCloud,
}

impl DenoiseQuery {
    pub fn new(clean_center: Point3, noise: Point3, local_gt: PointCloud) -> Self {
        let noisy_center = std::array::from_fn(|a| clean_center[a] + noise[a]);
        Self { clean_center, noise, noisy_center, local_gt }
    }
}

/// Samples `count` centres from `gt`, perturbs them with isotropic
/// Gaussian noise of standard deviation `sigma`, and attaches the `patch`
/// nearest ground-truth points to each clean centre.
pub fn build_denoise_queries<R: Rng>(gt: &PointCloud, count: usize, sigma: f64, patch: usize, rng: &mut R) -> Result<Vec<DenoiseQuery>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if patch == 0 || patch > gt.count() {
        return invalid_arg(format!("patch size {patch} must lie in 1..={}", gt.count()));
    }
    let normal = Normal::new(0.0, sigma.max(0.0)).map_err(|e| crate::Error::InvalidArgument(e.to_string()))?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let c = gt.points()[rng.random_range(0..gt.count())];
        let noise: Point3 = if sigma > 0.0 { std::array::from_fn(|_| normal.sample(rng)) } else { [0.0; 3] };
        let center = PointCloud::new(vec![c])?;
        let idx = geom::knn(&center, gt, patch)?;
        out.push(DenoiseQuery::new(c, noise, gt.select(idx.ids())?));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    /// CD-ℓ1 between proxy centres and ground truth.
    pub j0: f64,
    /// CD-ℓ1 between the dense prediction and ground truth.
    pub j1: f64,
    /// Mean CD-ℓ1 between predicted and true local patches.
    pub j_denoise: f64,
    pub lambda: f64,
    pub total: f64,
    /// Set when no denoising queries were supplied.
    pub denoise_empty: bool,
}

impl LossBreakdown {
    pub fn compose(j0: f64, j1: f64, j_denoise: f64, lambda: f64, denoise_empty: bool) -> Self {
        Self { j0, j1, j_denoise, lambda, total: j0 + j1 + lambda * j_denoise, denoise_empty }
    }
}

/// Value-level objective. `predicted_local[i]` is the patch predicted for
/// `queries[i]`.
pub fn loss_total(proxies: &PointCloud, dense: &PointCloud, gt: &PointCloud, queries: &[DenoiseQuery], predicted_local: &[PointCloud], lambda: f64) -> Result<LossBreakdown> {
    if queries.len() != predicted_local.len() {
        return invalid_arg("one predicted patch per denoising query is required");
    }
    let j0 = chamfer_l1(proxies, gt)?;
    let j1 = chamfer_l1(dense, gt)?;
    let j_denoise = if queries.is_empty() {
        0.0
    } else {
        let mut s = 0.0;
        for (q, p) in queries.iter().zip(predicted_local) {
            s += chamfer_l1(p, &q.local_gt)?;
        }
        s / queries.len() as f64
    };
    Ok(LossBreakdown::compose(j0, j1, j_denoise, lambda, queries.is_empty()))
}

/// Differentiable objective on a graph. `predicted_local` holds all query
/// patches stacked, `patch_len` rows per query, in query order.
pub fn loss_graph(
    g: &mut Graph,
    proxies: Var,
    dense: Var,
    gt: &PointCloud,
    queries: &[DenoiseQuery],
    predicted_local: Option<Var>,
    patch_len: usize,
    lambda: f64,
) -> Result<(Var, LossBreakdown)> {
    let gt_var = g.constant(Tensor::matrix(gt.count(), 3, gt.to_flat())?);
    let j0 = g.chamfer(proxies, gt_var, ChamferKind::L1)?;
    let j1 = g.chamfer(dense, gt_var, ChamferKind::L1)?;
    let base = g.add(j0, j1)?;
    let (total, jd) = match (queries.is_empty(), predicted_local) {
        (false, Some(pred)) => {
            let mut terms = Vec::with_capacity(queries.len());
            for (i, q) in queries.iter().enumerate() {
                let p = g.slice_rows(pred, i * patch_len, (i + 1) * patch_len)?;
                let t = g.constant(Tensor::matrix(q.local_gt.count(), 3, q.local_gt.to_flat())?);
                terms.push(g.chamfer(p, t, ChamferKind::L1)?);
            }
            let stacked = g.concat(&terms)?;
            let s = g.sum(stacked);
            let jd = g.scale(s, 1.0 / queries.len() as f64);
            let weighted = g.scale(jd, lambda);
            (g.add(base, weighted)?, Some(jd))
        }
        (true, _) => (base, None),
        (false, None) => return invalid_arg("denoising queries given without predicted patches"),
    };
    let jd_value = jd.map_or(0.0, |v| g.value(v).item());
    let mut breakdown = LossBreakdown::compose(g.value(j0).item(), g.value(j1).item(), jd_value, lambda, queries.is_empty());
    breakdown.total = g.value(total).item();
    Ok((total, breakdown))
}

/// Mean evaluation metrics over a set of shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub entries: Vec<(String, f64)>,
    pub threshold_fraction: f64,
    pub n_shapes: usize,
    pub pred_points: usize,
    pub gt_points: usize,
    pub notes: Vec<(String, String)>,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(k, _)| k == name).map(|&(_, v)| v)
    }

    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.notes {
            s.push_str(&format!("{k}={v}\n"));
        }
        s.push_str(&format!("threshold_fraction={}\n", self.threshold_fraction));
        s.push_str(&format!("n_shapes={}\npred_points={}\ngt_points={}\n", self.n_shapes, self.pred_points, self.gt_points));
        for (k, v) in &self.entries {
            s.push_str(&format!("{k}={v:e}\n"));
        }
        s
    }

    /// JSON document: `{"metrics": [{"name", "value"}], "threshold_fraction",
    /// "cloud_sizes": {"pred", "gt", "shapes"}, "run": {...}}`.
    pub fn to_json(&self) -> String {
        let metrics: Vec<serde_json::Value> = self
            .entries
            .iter()
            .map(|(k, v)| serde_json::json!({ "name": k, "value": v }))
            .collect();
        let run: serde_json::Map<String, serde_json::Value> =
            self.notes.iter().map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone()))).collect();
        let doc = serde_json::json!({
            "metrics": metrics,
            "threshold_fraction": self.threshold_fraction,
            "cloud_sizes": { "pred": self.pred_points, "gt": self.gt_points, "shapes": self.n_shapes },
            "run": run,
        });
        serde_json::to_string_pretty(&doc).expect("report serialises")
    }
}
