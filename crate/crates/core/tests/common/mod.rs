//! Independent brute-force references and fixtures shared by the
//! integration tests.

#![allow(dead_code)]

use ptcomplete::autodiff::gradcheck::{check_gradients, GradCheckReport, FD_EPS};
use ptcomplete::autodiff::{Graph, ParamStore, Tensor, Var};
use ptcomplete::config::RunConfig;
use ptcomplete::geom::{Point3, PointCloud};
use ptcomplete::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn euclid(a: &Point3, b: &Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
    (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect()
}

pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new(random_points(rng, n)).unwrap()
}

/// Full sort of every reference point by `(distance, index)`.
pub fn oracle_knn(query: &Point3, reference: &[Point3], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..reference.len()).collect();
    order.sort_by(|&i, &j| euclid(query, &reference[i]).total_cmp(&euclid(query, &reference[j])).then(i.cmp(&j)));
    order.truncate(k);
    order
}

pub fn oracle_nearest(p: &Point3, set: &[Point3]) -> f64 {
    let mut best = f64::INFINITY;
    for q in set {
        let d = euclid(p, q);
        if d < best {
            best = d;
        }
    }
    best
}

pub fn oracle_chamfer(a: &[Point3], b: &[Point3], squared: bool) -> f64 {
    let mut total = 0.0;
    for (x, y) in [(a, b), (b, a)] {
        let mut s = 0.0;
        for p in x {
            let d = oracle_nearest(p, y);
            s += if squared { d * d } else { d };
        }
        total += s / x.len() as f64;
    }
    total
}

pub fn oracle_fscore(pred: &[Point3], gt: &[Point3], threshold: f64) -> f64 {
    let frac = |x: &[Point3], y: &[Point3]| x.iter().filter(|p| oracle_nearest(p, y) <= threshold).count() as f64 / x.len() as f64;
    let (p, r) = (frac(pred, gt), frac(gt, pred));
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Twice the largest distance from the centroid.
pub fn oracle_diameter(points: &[Point3]) -> f64 {
    let n = points.len() as f64;
    let c: Vec<f64> = (0..3).map(|a| points.iter().map(|p| p[a]).sum::<f64>() / n).collect();
    let c = [c[0], c[1], c[2]];
    2.0 * points.iter().map(|p| euclid(p, &c)).fold(0.0, f64::max)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `sum(y ⊙ w)` for a fixed pseudo-random `w`.
pub fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed);
    let w = g.constant(random_tensor(&mut r, g.value(y).shape()));
    let m = g.mul(y, w)?;
    Ok(g.sum(m))
}

pub fn gradcheck<F>(store: &ParamStore, per_tensor: Option<usize>, f: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    check_gradients(store, FD_EPS, per_tensor, f).unwrap()
}

/// Desk model with two encoder and two decoder blocks on torus data.
pub fn small_run(extra: &[(&str, &str)]) -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [("encoder_depth", "2"), ("decoder_depth", "2")].iter().chain(extra) {
        cfg.set(k, v).unwrap();
    }
    cfg.validate().unwrap();
    cfg
}

/// A reduced layout small enough for exhaustive finite differences.
pub fn tiny_run() -> RunConfig {
    small_run(&[
        ("n_gt_points", "96"),
        ("input_points", "64"),
        ("keep_fraction", "0.7"),
        ("dense_count", "48"),
        ("dense_dim", "4"),
        ("stage_counts", "32,16"),
        ("stage_dims", "6,8"),
        ("extractor_heads", "2"),
        ("k", "4"),
        ("m_subset", "2"),
        ("weight_hidden", "4"),
        ("encoder_depth", "1"),
        ("decoder_depth", "1"),
        ("heads", "2"),
        ("ffn_hidden", "8"),
        ("n_proxy", "8"),
        ("correction_dense_points", "24"),
        ("correction_lift_dim", "4"),
        ("correction_mid_count", "16"),
        ("correction_dims", "4,6"),
        ("correction_heads", "2"),
        ("upsample", "4"),
        ("patch_size", "8"),
        ("n_denoise", "3"),
        ("train_shapes", "4"),
        ("eval_shapes", "3"),
        ("batch", "2"),
    ])
}
