//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines appear in
//! `cargo test` output. Criterion 7 is reported but never fails the run.

mod common;

use std::time::{Duration, Instant};

use common::*;
use ptcomplete::attention::{DecoderBlock, EncoderBlock, SelfAttentionBlock};
use ptcomplete::autodiff::gradcheck::FD_TOLERANCE;
use ptcomplete::autodiff::{ChamferKind, Graph, ParamStore, Tensor};
use ptcomplete::checkpoint::Checkpoint;
use ptcomplete::completion::CompletionModel;
use ptcomplete::config::RunConfig;
use ptcomplete::geom::{self, NeighborIndex, PointCloud};
use ptcomplete::metrics::{self, build_denoise_queries, loss_graph, loss_total};
use ptcomplete::relation::{compute_r1, compute_r2, Lgrp, LgrpConfig, StLfe, WeightMode};
use ptcomplete::train::{self, Trainer};
use ptcomplete::Error;
use rand::seq::SliceRandom;
use rand::Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut knn_mismatch = 0;
    let (mut cd1, mut cd2, mut fs): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let instances = 100;
    for _ in 0..instances {
        let nq = r.random_range(1..=128);
        let nr = r.random_range(1..=512);
        let k = r.random_range(1..=nr.min(32));
        let q = random_cloud(&mut r, nq);
        let p = random_cloud(&mut r, nr);
        let index = geom::knn(&q, &p, k).unwrap();
        for (i, point) in q.points().iter().enumerate() {
            if index.row_ids(i) != oracle_knn(point, p.points(), k).as_slice() {
                knn_mismatch += 1;
            }
        }
        cd1 = cd1.max((metrics::chamfer_l1(&q, &p).unwrap() - oracle_chamfer(q.points(), p.points(), false)).abs());
        cd2 = cd2.max((metrics::chamfer_l2(&q, &p).unwrap() - oracle_chamfer(q.points(), p.points(), true)).abs());
        let t = 0.01 * oracle_diameter(p.points()) * r.random_range(1.0..20.0);
        let frac = t / oracle_diameter(p.points());
        fs = fs.max((metrics::f_score_abs(&q, &p, t).unwrap() - oracle_fscore(q.points(), p.points(), t)).abs());
        let via_fraction = metrics::f_score(&q, &p, frac).unwrap();
        fs = fs.max((via_fraction - oracle_fscore(q.points(), p.points(), frac * oracle_diameter(p.points()))).abs());
    }
    let elapsed = start.elapsed();
    let passed = knn_mismatch == 0 && cd1 <= 1e-12 && cd2 <= 1e-12 && fs == 0.0 && elapsed < Duration::from_secs(60);
    outcome(
        passed,
        format!(
            "{instances} instances each: knn row mismatches {knn_mismatch}, |Δ CD-l1| {cd1:.1e}, |Δ CD-l2| {cd2:.1e}, |Δ F| {fs:.1e}, {:.1}s",
            secs(elapsed)
        ),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2);
    let mut results: Vec<(String, f64, usize)> = Vec::new();
    let mut record = |name: &str, report: ptcomplete::autodiff::gradcheck::GradCheckReport| {
        results.push((name.to_string(), report.max_rel_err(), report.near_ties()));
    };

    let mut s = ParamStore::new();
    for (name, shape) in [("a", vec![3, 4]), ("b", vec![3, 4]), ("w", vec![4, 5]), ("bias", vec![1, 4]), ("t", vec![2, 3, 4])] {
        s.insert(name, random_tensor(&mut r, &shape));
    }
    record("matmul", gradcheck(&s, None, |g, s| {
        let (a, w, t) = (g.param(s, "a")?, g.param(s, "w")?, g.param(s, "t")?);
        let y = g.matmul(a, w)?;
        let z = g.matmul(t, w)?;
        let p = probe(g, y, 1)?;
        let q = probe(g, z, 2)?;
        g.add(p, q)
    }));
    record("add/sub/mul/scale/bias", gradcheck(&s, None, |g, s| {
        let (a, b, c) = (g.param(s, "a")?, g.param(s, "b")?, g.param(s, "bias")?);
        let x = g.add(a, c)?;
        let x = g.sub(x, b)?;
        let x = g.mul(x, b)?;
        let x = g.scale(x, 0.7);
        probe(g, x, 3)
    }));
    record("activations", gradcheck(&s, None, |g, s| {
        let a = g.param(s, "a")?;
        let parts = [g.relu(a), g.leaky_relu(a, 0.2), g.sigmoid(a), g.tanh(a), g.abs(a)];
        let y = g.concat(&parts)?;
        probe(g, y, 4)
    }));
    record("concat/concat_rows/slices/transpose/reshape/gather", gradcheck(&s, None, |g, s| {
        let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
        let c = g.concat(&[a, b])?;
        let c = g.slice_cols(c, 2, 7)?;
        let t = g.transpose(c)?;
        let t = g.reshape(t, &[3, 5])?;
        let rows = g.concat_rows(&[a, b])?;
        let rows = g.slice_rows(rows, 1, 5)?;
        let rows = g.gather_rows(rows, &[3, 0, 0, 2])?;
        let p = probe(g, t, 5)?;
        let q = probe(g, rows, 6)?;
        g.add(p, q)
    }));
    record("max/mean/sum/softmax/layer_norm", gradcheck(&s, None, |g, s| {
        let (t, a, bias) = (g.param(s, "t")?, g.param(s, "a")?, g.param(s, "bias")?);
        let m0 = g.max_over_axis(t, 0)?;
        let m1 = g.max_over_axis(t, 1)?;
        let n1 = g.mean_over_axis(t, 1)?;
        let sm = g.softmax(a)?;
        let ln = g.layer_norm(a, bias, bias)?;
        let parts = [probe(g, m0, 7)?, probe(g, m1, 8)?, probe(g, n1, 9)?, probe(g, sm, 10)?, probe(g, ln, 11)?];
        let all = g.concat(&parts)?;
        Ok(g.sum(all))
    }));
    let mut s = ParamStore::new();
    s.insert("x", random_tensor(&mut r, &[6, 3]));
    s.insert("y", random_tensor(&mut r, &[5, 3]));
    record("radial_tanh", gradcheck(&s, None, |g, s| {
        let x = g.param(s, "x")?;
        let x = g.scale(x, 1.5);
        let y = g.radial_tanh(x, 0.3);
        probe(g, y, 12)
    }));
    for (name, kind) in [("chamfer_l1", ChamferKind::L1), ("chamfer_l2", ChamferKind::L2)] {
        record(name, gradcheck(&s, None, |g, s| {
            let (x, y) = (g.param(s, "x")?, g.param(s, "y")?);
            g.chamfer(x, y, kind)
        }));
    }

    let (n, d, k) = (20, 6, 6);
    let coords = random_cloud(&mut r, n);
    let index = geom::knn(&coords, &coords, k).unwrap();
    let mut cfg = LgrpConfig::new(k, 3, d, 10);
    cfg.weight_hidden = 6;
    let lgrp = Lgrp::new("lgrp", cfg.clone()).unwrap();
    let mut s = ParamStore::new();
    lgrp.init(&mut s, &mut r).unwrap();
    s.insert("in.coords", Tensor::matrix(n, 3, coords.to_flat()).unwrap());
    s.insert("in.feats", random_tensor(&mut r, &[n, d]));
    record("lgrp_forward", gradcheck(&s, None, |g, s| {
        let (c, f) = (g.param(s, "in.coords")?, g.param(s, "in.feats")?);
        let y = lgrp.forward(g, s, c, f, c, f, &index)?;
        probe(g, y, 13)
    }));
    let stlfe = StLfe::new("stlfe", cfg, 8).unwrap();
    let mut s = ParamStore::new();
    stlfe.init(&mut s, &mut r).unwrap();
    s.insert("in.feats", random_tensor(&mut r, &[n, d]));
    let fixed = Tensor::matrix(n, 3, coords.to_flat()).unwrap();
    record("st_lfe", gradcheck(&s, None, |g, s| {
        let c = g.constant(fixed.clone());
        let f = g.param(s, "in.feats")?;
        let st = stlfe.forward(g, s, c, f, 5, &[])?;
        probe(g, st.feats, 14)
    }));

    let (dim, heads, hidden) = (64, 4, 64);
    let attn = SelfAttentionBlock::new("attn", dim, heads).unwrap();
    let enc: Vec<_> = (0..2).map(|i| EncoderBlock::new(&format!("enc{i}"), dim, heads, hidden).unwrap()).collect();
    let dec: Vec<_> = (0..2).map(|i| DecoderBlock::new(&format!("dec{i}"), dim, heads, hidden).unwrap()).collect();
    let mut s = ParamStore::new();
    attn.init(&mut s, &mut r).unwrap();
    enc.iter().for_each(|b| b.init(&mut s, &mut r).unwrap());
    dec.iter().for_each(|b| b.init(&mut s, &mut r).unwrap());
    s.insert("in.x", random_tensor(&mut r, &[6, dim]));
    s.insert("in.memory", random_tensor(&mut r, &[5, dim]));
    record("attention_block", gradcheck(&s, Some(8), |g, s| {
        let x = g.param(s, "in.x")?;
        let y = attn.forward(g, s, x, &mut Vec::new())?;
        probe(g, y, 15)
    }));
    record("encoder_2_block_desk", gradcheck(&s, Some(8), |g, s| {
        let m = g.param(s, "in.memory")?;
        let mut maps = Vec::new();
        let y = enc.iter().try_fold(m, |h, b| b.forward(g, s, h, &mut maps))?;
        probe(g, y, 16)
    }));
    record("decoder_2_block_desk", gradcheck(&s, Some(8), |g, s| {
        let (x, m) = (g.param(s, "in.x")?, g.param(s, "in.memory")?);
        let mut maps = Vec::new();
        let y = dec.iter().try_fold(x, |h, b| b.forward(g, s, h, m, &mut maps))?;
        probe(g, y, 17)
    }));

    let cfg = tiny_run();
    let model = CompletionModel::new(cfg.model.clone()).unwrap();
    let params = model.init_params(&mut r).unwrap();
    let (partial, gt) = train::train_pair(&cfg, 0).unwrap();
    record("full_network_objective", gradcheck(&params, Some(3), |g, s| {
        let fwd = model.forward(g, s, &partial, 3)?;
        let (loss, _) = loss_graph(g, fwd.proxies.coords, fwd.dense, &gt, &[], None, cfg.model.upsample, cfg.lambda)?;
        Ok(loss)
    }));

    let elapsed = start.elapsed();
    let worst = results.iter().cloned().fold((String::new(), 0.0, 0), |w, x| if x.1 > w.1 { x } else { w });
    let ties: usize = results.iter().map(|r| r.2).sum();
    let passed = worst.1 < FD_TOLERANCE && elapsed < Duration::from_secs(300);
    outcome(
        passed,
        format!(
            "{} checks, worst relative error {:.2e} ({}), eps 1e-5, {ties} entries near a kink re-measured at 1e-6, {:.1}s",
            results.len(),
            worst.1,
            worst.0,
            secs(elapsed)
        ),
    )
}

/// Multiples of 2^-8 in [-2, 2], so sums and differences are exact.
fn dyadic(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-512i32..=512) as f64 / 256.0).collect()
}

fn relation_properties() -> Outcome {
    let mut r = rng(3);
    let (nq, k, d) = (10, 8, 5);
    let mut r1_err: f64 = 0.0;
    let mut r2_shift: f64 = 0.0;
    let mut r2_homog: f64 = 0.0;
    for trial in 0..21 {
        let q = dyadic(&mut r, nq * 3);
        let v = dyadic(&mut r, nq * k * 3);
        let t = dyadic(&mut r, 3);
        let shift = |x: &[f64]| x.iter().enumerate().map(|(i, c)| c + t[i % 3]).collect::<Vec<_>>();
        let mut g = Graph::new();
        let (qa, va) = (g.constant(Tensor::matrix(nq, 3, q.clone()).unwrap()), g.constant(Tensor::matrix(nq * k, 3, v.clone()).unwrap()));
        let (qb, vb) = (g.constant(Tensor::matrix(nq, 3, shift(&q)).unwrap()), g.constant(Tensor::matrix(nq * k, 3, shift(&v)).unwrap()));
        let a = compute_r1(&mut g, qa, va, k).unwrap();
        let b = compute_r1(&mut g, qb, vb, k).unwrap();
        r1_err = g.value(a).data().iter().zip(g.value(b).data()).map(|(x, y)| (x - y).abs()).fold(r1_err, f64::max);

        let fq = random_tensor(&mut r, &[nq, d]);
        let fv = random_tensor(&mut r, &[nq * k, d]);
        let c: Vec<f64> = (0..d).map(|_| r.random_range(-3.0..3.0)).collect();
        let alpha = r.random_range(0.1..5.0);
        let offset = |t: &Tensor| Tensor::new(t.shape().to_vec(), t.data().iter().enumerate().map(|(i, x)| x + c[i % d]).collect()).unwrap();
        let scaled = |t: &Tensor| Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| alpha * x).collect()).unwrap();
        let m = [2, 4, 8][trial % 3];
        let mut r2 = |a: Tensor, b: Tensor| {
            let (x, y) = (g.constant(a), g.constant(b));
            let out = compute_r2(&mut g, x, y, k, m).unwrap();
            g.value(out).data().to_vec()
        };
        let base = r2(fq.clone(), fv.clone());
        let moved = r2(offset(&fq), offset(&fv));
        let grown = r2(scaled(&fq), scaled(&fv));
        r2_shift = base.iter().zip(&moved).map(|(x, y)| (x - y).abs()).fold(r2_shift, f64::max);
        r2_homog = base.iter().zip(&grown).map(|(x, y)| (alpha * x - y).abs()).fold(r2_homog, f64::max);
    }

    let mut g = Graph::new();
    let fq = random_tensor(&mut r, &[nq, d]);
    let edge: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
    let fv: Vec<f64> = (0..nq * k * d).map(|i| fq.data()[(i / (k * d)) * d + i % d] + edge[i % d]).collect();
    let (x, y) = (g.constant(fq), g.constant(Tensor::matrix(nq * k, d, fv).unwrap()));
    let equal = compute_r2(&mut g, x, y, k, k).unwrap();
    let equal_max = g.value(equal).data().iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let mut g = Graph::new();
    let q = g.constant(Tensor::matrix(1, 1, vec![0.0]).unwrap());
    let v = g.constant(Tensor::matrix(2, 1, vec![2.0, 4.0]).unwrap());
    let hand = compute_r2(&mut g, q, v, 2, 2).unwrap();
    let hand_ok = g.value(hand).data() == [1.0, 1.0];

    let passed = r1_err == 0.0 && r2_shift <= 1e-12 && r2_homog <= 1e-12 && equal_max <= 1e-12 && hand_ok;
    outcome(
        passed,
        format!(
            "R1 translation err {r1_err:.1e} (dyadic inputs), M in {{2,4,8}}: R2 shift err {r2_shift:.1e}, R2 homogeneity err {r2_homog:.1e}, equal-edge max {equal_max:.1e}, hand example [1,1] {}",
            if hand_ok { "exact" } else { "WRONG" }
        ),
    )
}

fn aggregation_invariance() -> Outcome {
    let mut r = rng(4);
    let (n, d, k, out) = (40, 5, 8, 7);
    let mut perm_err: f64 = 0.0;
    let mut oracle_err: f64 = 0.0;
    for trial in 0..12 {
        let coords = random_cloud(&mut r, n);
        let queries: Vec<usize> = (0..n).step_by(3).collect();
        let qcloud = coords.select(&queries).unwrap();
        let index = geom::knn(&qcloud, &coords, k).unwrap();
        let (mut ids, mut dists) = (Vec::new(), Vec::new());
        for row in 0..index.n_query() {
            let mut pairs: Vec<(usize, f64)> = index.row_ids(row).iter().copied().zip(index.row_dist(row).iter().copied()).collect();
            pairs.shuffle(&mut r);
            ids.extend(pairs.iter().map(|p| p.0));
            dists.extend(pairs.iter().map(|p| p.1));
        }
        let shuffled = NeighborIndex::from_rows(k, ids, dists).unwrap();
        let feats = random_tensor(&mut r, &[n, d]);

        for weights in [WeightMode::FULL, WeightMode::Unit] {
            let mut cfg = LgrpConfig::new(k, [2, 4, 8][trial % 3], d, out);
            cfg.weights = weights;
            let lgrp = Lgrp::new("agg", cfg).unwrap();
            let mut store = ParamStore::new();
            lgrp.init(&mut store, &mut r).unwrap();
            let mut g = Graph::new();
            let c = g.constant(Tensor::matrix(n, 3, coords.to_flat()).unwrap());
            let f = g.constant(feats.clone());
            let qc = g.gather_rows(c, &queries).unwrap();
            let qf = g.gather_rows(f, &queries).unwrap();
            let a = lgrp.forward(&mut g, &store, qc, qf, c, f, &index).unwrap();
            let b = lgrp.forward(&mut g, &store, qc, qf, c, f, &shuffled).unwrap();
            let (av, bv) = (g.value(a).data().to_vec(), g.value(b).data().to_vec());
            perm_err = av.iter().zip(&bv).map(|(x, y)| (x - y).abs()).fold(perm_err, f64::max);

            if weights == WeightMode::Unit {
                let layer = lgrp.edge_mlp().last_layer();
                let w = store.get(&layer.weight_name()).unwrap().data().to_vec();
                let bias = store.get(&layer.bias_name()).unwrap().data().to_vec();
                let fd = feats.data();
                for (row, &qi) in queries.iter().enumerate() {
                    for o in 0..out {
                        let mut best = f64::NEG_INFINITY;
                        for &j in shuffled.row_ids(row) {
                            let mut z = bias[o];
                            for c in 0..d {
                                let center = fd[qi * d + c];
                                let edge = fd[j * d + c] - center;
                                z += center * w[c * out + o] + edge * w[(d + c) * out + o];
                            }
                            let h = if z > 0.0 { z } else { 0.2 * z };
                            best = best.max(h);
                        }
                        oracle_err = oracle_err.max((best - av[row * out + o]).abs());
                    }
                }
            }
        }
    }
    let passed = perm_err <= 1e-12 && oracle_err <= 1e-10;
    outcome(passed, format!("neighbour permutation err {perm_err:.1e} (M in {{2,4,8}}), unit-weight vs EdgeConv-max oracle err {oracle_err:.1e}"))
}

fn loss_identities() -> Outcome {
    let mut r = rng(5);
    let mut identity: f64 = 0.0;
    let mut graph_identity: f64 = 0.0;
    let mut lambda_zero_ok = true;
    let mut perfect_max: f64 = 0.0;
    let mut negative = false;
    for _ in 0..50 {
        let gt = random_cloud(&mut r, 80);
        let proxies = random_cloud(&mut r, 12);
        let dense = random_cloud(&mut r, 60);
        let lambda = r.random_range(0.0..3.0);
        let queries = build_denoise_queries(&gt, 4, 0.05, 10, &mut r).unwrap();
        let local: Vec<PointCloud> = (0..4).map(|_| random_cloud(&mut r, 6)).collect();
        let l = loss_total(&proxies, &dense, &gt, &queries, &local, lambda).unwrap();
        let j0 = oracle_chamfer(proxies.points(), gt.points(), false);
        let j1 = oracle_chamfer(dense.points(), gt.points(), false);
        let jd = queries.iter().zip(&local).map(|(q, p)| oracle_chamfer(p.points(), q.local_gt.points(), false)).sum::<f64>() / 4.0;
        identity = identity.max((l.total - (l.j0 + l.j1 + l.lambda * l.j_denoise)).abs());
        identity = identity.max((l.total - (j0 + j1 + lambda * jd)).abs());
        negative |= l.j0 < 0.0 || l.j1 < 0.0 || l.j_denoise < 0.0;

        let mut g = Graph::new();
        let pv = g.constant(Tensor::matrix(12, 3, proxies.to_flat()).unwrap());
        let dv = g.constant(Tensor::matrix(60, 3, dense.to_flat()).unwrap());
        let flat: Vec<f64> = local.iter().flat_map(|c| c.to_flat()).collect();
        let lv = g.constant(Tensor::matrix(24, 3, flat).unwrap());
        let (_, gl) = loss_graph(&mut g, pv, dv, &gt, &queries, Some(lv), 6, lambda).unwrap();
        graph_identity = graph_identity.max((gl.total - (gl.j0 + gl.j1 + gl.lambda * gl.j_denoise)).abs());

        let z = loss_total(&proxies, &dense, &gt, &queries, &local, 0.0).unwrap();
        lambda_zero_ok &= z.total == z.j0 + z.j1;

        let clean = build_denoise_queries(&gt, 5, 0.0, 10, &mut r).unwrap();
        let perfect: Vec<PointCloud> = clean.iter().map(|q| q.local_gt.clone()).collect();
        let p = loss_total(&proxies, &dense, &gt, &clean, &perfect, 1.0).unwrap();
        perfect_max = perfect_max.max(p.j_denoise);
    }
    let passed = identity <= 1e-15 && graph_identity <= 1e-15 && lambda_zero_ok && perfect_max == 0.0 && !negative;
    outcome(
        passed,
        format!(
            "|total - (j0+j1+λ·jd)| {identity:.1e} (graph {graph_identity:.1e}), λ=0 exact {lambda_zero_ok}, zero-noise perfect j_denoise {perfect_max:.1e}"
        ),
    )
}

fn overfit_convergence() -> Outcome {
    let start = Instant::now();
    let cfg = small_run(&[("train_shapes", "1"), ("eval_shapes", "1"), ("batch", "1"), ("epochs", "500"), ("shape_family", "torus")]);
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    let pairs = trainer.pairs().to_vec();
    let before = train::evaluate_pairs(&cfg, &trainer.state.params, &pairs, 0).unwrap();
    trainer.run(None, |_, _| Ok(())).unwrap();
    let after = train::evaluate_pairs(&cfg, &trainer.state.params, &pairs, 0).unwrap();
    let elapsed = start.elapsed();
    let (cd0, cd1) = (before.get("dense_cd_l2").unwrap(), after.get("dense_cd_l2").unwrap());
    let drop = 1.0 - cd1 / cd0;
    let fscore = after.get("fscore").unwrap();
    let passed = trainer.state.step == 500 && drop >= 0.8 && fscore >= 0.5 && elapsed <= Duration::from_secs(600);
    outcome(
        passed,
        format!(
            "500 steps: dense CD-l2 {cd0:.4e} -> {cd1:.4e} ({:.1}% drop), F-Score@1% {fscore:.3} (output incl. input), {:.0}s",
            100.0 * drop,
            secs(elapsed)
        ),
    )
}

fn ablation_direction() -> Outcome {
    let start = Instant::now();
    let epochs = std::env::var("PTC_ABLATION_EPOCHS").unwrap_or_else(|_| "10".into());
    let seeds = 10;
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..seeds {
        let seed_s = seed.to_string();
        let base = [("train_shapes", "8"), ("batch", "2"), ("epochs", epochs.as_str()), ("eval_shapes", "20"), ("seed", seed_s.as_str())];
        let full = small_run(&base);
        let mut plain_keys = base.to_vec();
        plain_keys.extend([("weights", "unit"), ("correction", "false")]);
        let plain = small_run(&plain_keys);
        let score = |cfg: &RunConfig| {
            let mut t = Trainer::new(cfg.clone()).unwrap();
            t.run(None, |_, _| Ok(())).unwrap();
            train::evaluate(cfg, &t.state.params).unwrap().get("dense_cd_l2").unwrap()
        };
        let (a, b) = (score(&full), score(&plain));
        if a <= b {
            wins += 1;
        }
        rows.push(format!("{a:.4}/{b:.4}"));
    }
    outcome(
        wins >= 7,
        format!(
            "full <= unit-weight/no-correction in {wins}/{seeds} seeds (mean dense CD-l2 full/plain: {}), {} epochs x 4 steps, {:.0}s",
            rows.join(" "),
            epochs,
            secs(start.elapsed())
        ),
    )
}

fn determinism_and_persistence() -> Outcome {
    let cfg = small_run(&[("train_shapes", "4"), ("batch", "2"), ("epochs", "2"), ("eval_shapes", "3"), ("seed", "11")]);
    let run = || {
        let mut t = Trainer::new(cfg.clone()).unwrap();
        t.run(None, |_, _| Ok(())).unwrap();
        t
    };
    let (a, b) = (run(), run());
    let report_a = train::evaluate(&cfg, &a.state.params).unwrap();
    let report_b = train::evaluate(&cfg, &b.state.params).unwrap();
    let identical_runs = a.state == b.state && report_a.to_text() == report_b.to_text();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.bin");
    let mut first = Trainer::new(cfg.clone()).unwrap();
    first.run(Some(2), |_, _| Ok(())).unwrap();
    first.checkpoint().save(&path).unwrap();
    let mut resumed = Trainer::from_checkpoint(Checkpoint::load(&path).unwrap()).unwrap();
    resumed.run(None, |_, _| Ok(())).unwrap();
    let report_c = train::evaluate(&cfg, &resumed.state.params).unwrap();
    let resume_ok = resumed.state == a.state && report_c.to_text() == report_a.to_text();

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    std::fs::write(&path, &bytes).unwrap();
    let corrupt_detected = matches!(Checkpoint::load(&path), Err(Error::Checksum(_)));

    outcome(
        identical_runs && resume_ok && corrupt_detected,
        format!("identical runs bitwise {identical_runs}, resume == uninterrupted {resume_ok}, corrupt checkpoint -> checksum error {corrupt_detected}"),
    )
}

fn schedule_conformance() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::pcn();
    let model = CompletionModel::new(cfg.model.clone()).unwrap();
    let params = model.init_params(&mut rng(9)).unwrap();
    let (partial, _) = train::train_pair(&cfg, 0).unwrap();
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, &params, &partial, 0).unwrap();
    let trace = fwd.extracted.trace.clone();
    let correction_width = cfg.model.correction.as_ref().unwrap().max_width();
    let dense_rows = g.value(fwd.dense).rows();
    let proxy_rows = g.value(fwd.proxies.coords).rows();
    let latent = g.value(fwd.latent).shape().to_vec();
    let elapsed = start.elapsed();
    let passed = partial.count() == 2048
        && trace == [(1048, 96), (512, 192), (256, 384)]
        && correction_width < 32
        && proxy_rows == 512
        && dense_rows == 16384
        && latent == [256, 384]
        && elapsed < Duration::from_secs(60);
    outcome(
        passed,
        format!(
            "input {} -> {} , latent {:?}, proxies {proxy_rows}, dense {dense_rows}, correction max width {correction_width}, {:.1}s",
            partial.count(),
            trace.iter().map(|(c, w)| format!("{c}/{w}")).collect::<Vec<_>>().join(" -> "),
            latent,
            secs(elapsed)
        ),
    )
}

fn main() {
    let only: Option<Vec<usize>> = std::env::args().skip(1).find(|a| !a.starts_with('-')).map(|a| {
        a.split(',').filter_map(|x| x.parse().ok()).collect()
    });
    let criteria: [(usize, &str, bool, fn() -> Outcome); 9] = [
        (1, "oracle equivalence", true, oracle_equivalence),
        (2, "gradient suite", true, gradient_suite),
        (3, "relation metric properties", true, relation_properties),
        (4, "aggregation invariance", true, aggregation_invariance),
        (5, "loss identity and reductions", true, loss_identities),
        (6, "overfit convergence", true, overfit_convergence),
        (7, "ablation direction (soft, reported)", false, ablation_direction),
        (8, "determinism and persistence", true, determinism_and_persistence),
        (9, "schedule conformance", true, schedule_conformance),
    ];
    let mut failed = Vec::new();
    for (id, name, gated, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let o = check();
        let label = match (o.passed, gated) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "MISS",
        };
        println!("criterion {id} {label} {name}: {}", o.detail);
        if gated && !o.passed {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
