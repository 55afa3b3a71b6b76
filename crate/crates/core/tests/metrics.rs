mod common;

use common::*;
use ptcomplete::geom::PointCloud;
use ptcomplete::metrics::{self, build_denoise_queries, loss_total, LossBreakdown};
use rand::Rng;

#[test]
fn f_score_uses_fraction_of_gt_bounding_sphere() {
    let mut r = rng(20);
    for _ in 0..100 {
        let (np, ng) = (r.random_range(1..120), r.random_range(1..120));
        let pred = random_cloud(&mut r, np);
        let gt = random_cloud(&mut r, ng);
        let frac = r.random_range(0.005..0.3);
        let want = oracle_fscore(pred.points(), gt.points(), frac * oracle_diameter(gt.points()));
        assert_eq!(metrics::f_score(&pred, &gt, frac).unwrap(), want);
    }
}

#[test]
fn f_score_rejects_non_positive_fraction() {
    let mut r = rng(21);
    let a = random_cloud(&mut r, 10);
    assert!(metrics::f_score(&a, &a, 0.0).is_err());
    assert!(metrics::f_score(&a, &a, f64::NAN).is_err());
}

#[test]
fn fidelity_and_mmd_match_oracles() {
    let mut r = rng(22);
    for _ in 0..30 {
        let partial = random_cloud(&mut r, 40);
        let pred = random_cloud(&mut r, 70);
        let want = partial.points().iter().map(|p| oracle_nearest(p, pred.points())).sum::<f64>() / 40.0;
        assert!((metrics::fidelity(&partial, &pred).unwrap() - want).abs() < 1e-12);
        let refs: Vec<PointCloud> = (0..5).map(|_| random_cloud(&mut r, 50)).collect();
        let want = refs.iter().map(|g| oracle_chamfer(pred.points(), g.points(), true)).fold(f64::INFINITY, f64::min);
        assert!((metrics::mmd(&pred, &refs).unwrap() - want).abs() < 1e-12);
    }
    let a = random_cloud(&mut r, 3);
    assert!(metrics::mmd(&a, &[]).is_err());
}

#[test]
fn denoise_queries_carry_the_nearest_patch_of_the_clean_centre() {
    let mut r = rng(23);
    let gt = random_cloud(&mut r, 200);
    let queries = build_denoise_queries(&gt, 300, 0.05, 12, &mut r).unwrap();
    let mut sq = 0.0;
    for q in &queries {
        assert!(gt.points().contains(&q.clean_center));
        let ids = oracle_knn(&q.clean_center, gt.points(), 12);
        assert_eq!(q.local_gt, gt.select(&ids).unwrap());
        for a in 0..3 {
            assert_eq!(q.noisy_center[a], q.clean_center[a] + q.noise[a]);
            sq += q.noise[a] * q.noise[a];
        }
    }
    let std = (sq / (3.0 * queries.len() as f64)).sqrt();
    assert!((std - 0.05).abs() < 0.006, "empirical noise std {std}");
    assert!(build_denoise_queries(&gt, 2, 0.05, 201, &mut r).is_err());
    assert!(build_denoise_queries(&gt, 0, 0.05, 201, &mut r).unwrap().is_empty());
}

#[test]
fn loss_total_composes_the_three_terms() {
    let mut r = rng(24);
    let gt = random_cloud(&mut r, 60);
    let proxies = random_cloud(&mut r, 8);
    let dense = random_cloud(&mut r, 32);
    let queries = build_denoise_queries(&gt, 3, 0.05, 6, &mut r).unwrap();
    let local: Vec<PointCloud> = (0..3).map(|_| random_cloud(&mut r, 4)).collect();
    let l = loss_total(&proxies, &dense, &gt, &queries, &local, 0.5).unwrap();
    assert_eq!(l.j0, metrics::chamfer_l1(&proxies, &gt).unwrap());
    assert_eq!(l.j1, metrics::chamfer_l1(&dense, &gt).unwrap());
    assert_eq!(l.total, l.j0 + l.j1 + 0.5 * l.j_denoise);
    assert_eq!(l, LossBreakdown::compose(l.j0, l.j1, l.j_denoise, 0.5, false));
    assert!(loss_total(&proxies, &dense, &gt, &queries, &local[..2], 0.5).is_err());

    let empty = loss_total(&proxies, &dense, &gt, &[], &[], 0.5).unwrap();
    assert_eq!(empty.j_denoise, 0.0);
    assert!(empty.denoise_empty);
    assert_eq!(empty.total, empty.j0 + empty.j1);
}
