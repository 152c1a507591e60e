mod common;

use common::*;
use fpgate::baselines::{fit_baseline, score_baseline, BaselineSpec, GaussianModel, KdeModel, PcaModel};
use fpgate::Tensor;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

fn random_matrix(d: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng(seed);
    DMatrix::from_fn(d, d, |_, _| r.sample::<f64, _>(StandardNormal))
}

fn apply(m: &DMatrix<f64>, b: &[f64], x: &[f64]) -> Vec<f64> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)] * x[j]).sum::<f64>() + b[i])
        .collect()
}

/// Product-of-normals KDE without any log-space tricks.
fn brute_kde_nll(points: &[Vec<f64>], h: f64, x: &[f64]) -> f64 {
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * h);
    let density: f64 = points
        .iter()
        .map(|p| p.iter().zip(x).map(|(a, b)| norm * (-(a - b).powi(2) / (2.0 * h * h)).exp()).product::<f64>())
        .sum::<f64>()
        / points.len() as f64;
    -density.ln()
}

#[test]
fn kde_matches_brute_force() {
    let mut r = rng(1);
    for (d, h) in [(1, 0.3), (2, 0.5), (3, 0.8), (5, 1.1)] {
        let pts = rows(&gaussian(40, d, 1.0, &mut r));
        let kde = KdeModel::new(pts.clone(), h).unwrap();
        for q in rows(&gaussian(20, d, 1.5, &mut r)) {
            let (a, b) = (kde.score(&q), brute_kde_nll(&pts, h, &q));
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "d={d}: {a} vs {b}");
        }
    }
}

#[test]
fn kde_far_queries_stay_finite() {
    let kde = KdeModel::new(vec![vec![0.0, 0.0]], 0.1).unwrap();
    let s = kde.score(&[100.0, 0.0]);
    assert!(s.is_finite());
    let expected = 100.0f64.powi(2) / (2.0 * 0.01) + (2.0 * std::f64::consts::PI * 0.01).ln();
    assert!((s - expected).abs() < 1e-9 * expected);
}

#[test]
fn kde_density_integrates_to_one() {
    let pts = rows(&gaussian(30, 2, 1.0, &mut rng(3)));
    let kde = KdeModel::new(pts, 0.4).unwrap();
    let (lo, hi, n) = (-8.0, 8.0, 320);
    let step = (hi - lo) / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let q = [lo + (i as f64 + 0.5) * step, lo + (j as f64 + 0.5) * step];
            total += (-kde.score(&q)).exp();
        }
    }
    assert!((total * step * step - 1.0).abs() < 1e-3);
}

#[test]
fn kde_is_translation_equivariant() {
    let mut r = rng(4);
    let pts = rows(&gaussian(25, 3, 1.0, &mut r));
    let shift = [5.0, -2.0, 0.5];
    let moved: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
    let (a, b) = (KdeModel::new(pts, 0.6).unwrap(), KdeModel::new(moved, 0.6).unwrap());
    for q in rows(&gaussian(10, 3, 1.0, &mut r)) {
        let mq: Vec<f64> = q.iter().zip(&shift).map(|(x, s)| x + s).collect();
        assert!((a.score(&q) - b.score(&mq)).abs() < 1e-10);
    }
}

#[test]
fn mahalanobis_is_affine_invariant() {
    let mut r = rng(5);
    let d = 4;
    let pts = rows(&gaussian(60, d, 1.0, &mut r));
    let m = random_matrix(d, 6) + DMatrix::identity(d, d) * 2.0;
    let b = [1.0, -3.0, 0.25, 7.0];
    let mapped: Vec<Vec<f64>> = pts.iter().map(|p| apply(&m, &b, p)).collect();
    let g0 = GaussianModel::fit(&pts, 0.0).unwrap();
    let g1 = GaussianModel::fit(&mapped, 0.0).unwrap();
    for q in rows(&gaussian(10, d, 2.0, &mut r)) {
        let (s0, s1) = (g0.score(&q), g1.score(&apply(&m, &b, &q)));
        assert!((s0 - s1).abs() <= 1e-8 * s0.max(1.0), "{s0} vs {s1}");
    }
}

#[test]
fn mahalanobis_matches_explicit_inverse() {
    let mut r = rng(7);
    let pts = rows(&gaussian(50, 3, 1.0, &mut r));
    let g = GaussianModel::fit(&pts, 0.2).unwrap();
    let n = pts.len() as f64;
    let mean: Vec<f64> = (0..3).map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / n).collect();
    let cov = DMatrix::from_fn(3, 3, |i, j| {
        pts.iter().map(|p| (p[i] - mean[i]) * (p[j] - mean[j])).sum::<f64>() / (n - 1.0)
    });
    let target = cov.trace() / 3.0;
    let shrunk = &cov * 0.8 + DMatrix::identity(3, 3) * (0.2 * target);
    let inv = shrunk.try_inverse().unwrap();
    for q in rows(&gaussian(5, 3, 1.0, &mut r)) {
        let c = nalgebra::DVector::from_iterator(3, q.iter().zip(&mean).map(|(a, m)| a - m));
        let expected = (c.transpose() * &inv * &c)[(0, 0)];
        assert!((g.score(&q) - expected).abs() < 1e-10 * expected.max(1.0));
    }
}

#[test]
fn pca_residual_is_rotation_invariant() {
    let mut r = rng(8);
    let d = 5;
    let pts = rows(&gaussian(80, d, 1.0, &mut r));
    let q = random_matrix(d, 9).qr().q();
    let b = [0.0, 1.0, 2.0, 3.0, 4.0];
    let mapped: Vec<Vec<f64>> = pts.iter().map(|p| apply(&q, &b, p)).collect();
    let (p0, p1) = (PcaModel::fit(&pts, 2).unwrap(), PcaModel::fit(&mapped, 2).unwrap());
    for x in rows(&gaussian(10, d, 1.0, &mut r)) {
        assert!((p0.score(&x) - p1.score(&apply(&q, &b, &x))).abs() < 1e-9);
    }
}

#[test]
fn generic_entry_points_agree_with_models() {
    let mut r = rng(10);
    let tp = gaussian(30, 2, 1.0, &mut r);
    let x = gaussian(8, 2, 1.0, &mut r);
    let kde = fit_baseline(&BaselineSpec::Kde { bandwidth: Some(0.5) }, &tp).unwrap();
    let direct = KdeModel::new(rows(&tp), 0.5).unwrap();
    let scores = score_baseline(&kde, &x).unwrap();
    for (i, s) in scores.iter().enumerate() {
        assert_eq!(*s, direct.score(x.row_slice(i)));
    }
    let tp32: Tensor<f32> = Tensor::from_fn(30, 2, |i, j| tp.get(i, j) as f32);
    assert!(fit_baseline(&BaselineSpec::Gaussian { shrinkage: 0.05 }, &tp32).is_ok());
    assert!(fit_baseline(&BaselineSpec::Pca { k: 2 }, &tp.select_rows(&[0])).is_err());
}
