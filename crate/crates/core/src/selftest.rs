//! Runtime self-checks: geometric kernels against brute-force references
//! and network blocks against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{DecoderBlock, EncoderBlock, SelfAttentionBlock};
use crate::autodiff::gradcheck::{check_gradients, FD_EPS, FD_TOLERANCE};
use crate::autodiff::{ChamferKind, Graph, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::geom::{self, dist, Point3, PointCloud};
use crate::metrics;
use crate::relation::{Lgrp, LgrpConfig, StLfe};

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

const INSTANCES: usize = 100;

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new((0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect()).unwrap()
}

fn brute_knn(q: &Point3, reference: &[Point3], k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = reference.iter().enumerate().map(|(i, r)| (dist(q, r), i)).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

fn brute_nearest(p: &Point3, set: &[Point3]) -> f64 {
    set.iter().map(|s| dist(p, s)).fold(f64::INFINITY, f64::min)
}

fn brute_chamfer(a: &[Point3], b: &[Point3], squared: bool) -> f64 {
    let side = |x: &[Point3], y: &[Point3]| {
        x.iter().map(|p| {
            let d = brute_nearest(p, y);
            if squared { d * d } else { d }
        }).sum::<f64>() / x.len() as f64
    };
    side(a, b) + side(b, a)
}

fn oracle_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut knn_ok = true;
    let mut cd_err: f64 = 0.0;
    let mut f_err: f64 = 0.0;
    for _ in 0..INSTANCES {
        let (nq, nr) = (rng.random_range(1..64), rng.random_range(1..128));
        let k = rng.random_range(1..=nr.min(16));
        let q = random_cloud(rng, nq);
        let r = random_cloud(rng, nr);
        let index = geom::knn(&q, &r, k)?;
        for (i, p) in q.points().iter().enumerate() {
            knn_ok &= index.row_ids(i) == brute_knn(p, r.points(), k).as_slice();
        }
        cd_err = cd_err
            .max((metrics::chamfer_l1(&q, &r)? - brute_chamfer(q.points(), r.points(), false)).abs())
            .max((metrics::chamfer_l2(&q, &r)? - brute_chamfer(q.points(), r.points(), true)).abs());
        let threshold = rng.random_range(0.05..0.5);
        let matched = |x: &PointCloud, y: &PointCloud| {
            x.points().iter().filter(|p| brute_nearest(p, y.points()) <= threshold).count() as f64 / x.count() as f64
        };
        let (p, rc) = (matched(&q, &r), matched(&r, &q));
        let want = if p + rc > 0.0 { 2.0 * p * rc / (p + rc) } else { 0.0 };
        f_err = f_err.max((metrics::f_score_abs(&q, &r, threshold)? - want).abs());
    }
    Ok(vec![
        CheckResult { name: "knn_oracle".into(), passed: knn_ok, detail: format!("{INSTANCES} instances, ids exact") },
        CheckResult { name: "chamfer_oracle".into(), passed: cd_err <= 1e-12, detail: format!("max abs err {cd_err:e}") },
        CheckResult { name: "fscore_oracle".into(), passed: f_err == 0.0, detail: format!("max abs err {f_err:e}") },
    ])
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn grad_result<F>(name: &str, store: &ParamStore, f: F) -> Result<CheckResult>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let report = check_gradients(store, FD_EPS, Some(24), f)?;
    let err = report.max_rel_err();
    Ok(CheckResult { name: name.into(), passed: err < FD_TOLERANCE, detail: format!("max rel err {err:e} ({})", report.worst().map_or("", |w| w.name.as_str())) })
}

/// Weighted sum so the loss depends on every output entry differently.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?);
    let prod = g.mul(y, w)?;
    Ok(g.sum(prod))
}

fn gradient_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let (n, d, k) = (12, 4, 4);

    let coords = random_cloud(rng, n);
    let index = geom::knn(&coords, &coords, k)?;
    let mut cfg = LgrpConfig::new(k, 2, d, 6);
    cfg.weight_hidden = 5;
    let lgrp = Lgrp::new("lgrp", cfg.clone())?;
    let mut store = ParamStore::new();
    lgrp.init(&mut store, rng)?;
    store.insert("in.feats", random_tensor(rng, n, d));
    store.insert("in.coords", Tensor::matrix(n, 3, coords.to_flat())?);
    out.push(grad_result("lgrp_forward", &store, |g, s| {
        let c = g.param(s, "in.coords")?;
        let f = g.param(s, "in.feats")?;
        let y = lgrp.forward(g, s, c, f, c, f, &index)?;
        probe(g, y, 1)
    })?);

    let stlfe = StLfe::new("stlfe", cfg, 6)?;
    let mut store = ParamStore::new();
    stlfe.init(&mut store, rng)?;
    store.insert("in.feats", random_tensor(rng, n, d));
    let fixed = Tensor::matrix(n, 3, coords.to_flat())?;
    out.push(grad_result("st_lfe", &store, |g, s| {
        let c = g.constant(fixed.clone());
        let f = g.param(s, "in.feats")?;
        let st = stlfe.forward(g, s, c, f, 3, &[])?;
        probe(g, st.feats, 2)
    })?);

    let attn = SelfAttentionBlock::new("attn", 8, 2)?;
    let enc: Vec<_> = (0..2).map(|i| EncoderBlock::new(&format!("enc{i}"), 8, 2, 8)).collect::<Result<_>>()?;
    let dec: Vec<_> = (0..2).map(|i| DecoderBlock::new(&format!("dec{i}"), 8, 2, 8)).collect::<Result<_>>()?;
    let mut store = ParamStore::new();
    attn.init(&mut store, rng)?;
    for b in &enc {
        b.init(&mut store, rng)?;
    }
    for b in &dec {
        b.init(&mut store, rng)?;
    }
    store.insert("in.x", random_tensor(rng, 5, 8));
    store.insert("in.memory", random_tensor(rng, 4, 8));
    out.push(grad_result("attention_encoder_decoder", &store, |g, s| {
        let mut maps = Vec::new();
        let x = g.param(s, "in.x")?;
        let m = g.param(s, "in.memory")?;
        let a = attn.forward(g, s, x, &mut maps)?;
        let latent = enc.iter().try_fold(m, |h, b| b.forward(g, s, h, &mut maps))?;
        let y = dec.iter().try_fold(a, |h, b| b.forward(g, s, h, latent, &mut maps))?;
        probe(g, y, 3)
    })?);

    let mut store = ParamStore::new();
    store.insert("in.pred", random_tensor(rng, 9, 3));
    let target = random_tensor(rng, 7, 3);
    for (name, kind) in [("chamfer_l1", ChamferKind::L1), ("chamfer_l2", ChamferKind::L2)] {
        out.push(grad_result(name, &store, |g, s| {
            let p = g.param(s, "in.pred")?;
            let t = g.constant(target.clone());
            g.chamfer(p, t, kind)
        })?);
    }
    Ok(out)
}

/// Runs every check with a fixed seed.
pub fn run() -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f);
    let mut results = oracle_checks(&mut rng)?;
    results.extend(gradient_checks(&mut rng)?);
    Ok(results)
}
