mod common;

use common::*;
use svll_reid::eval::{pca_project_2d, scatter_csv, separation_ratio};
use svll_reid::tensor::Tensor;

/// Top two eigenpairs of the population covariance, by cyclic Jacobi rotations.
fn reference(x: &[f64], n: usize, d: usize) -> ([f64; 2], f64, [Vec<f64>; 2]) {
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|r| x[r * d + j]).sum::<f64>() / n as f64).collect();
    let mut a = vec![vec![0.0; d]; d];
    for r in 0..n {
        for i in 0..d {
            for j in 0..d {
                a[i][j] += (x[r * d + i] - mean[i]) * (x[r * d + j] - mean[j]) / n as f64;
            }
        }
    }
    let trace: f64 = (0..d).map(|i| a[i][i]).sum();
    let mut v: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..d).flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let (c, s) = (1.0 / (t * t + 1.0).sqrt(), t / (t * t + 1.0).sqrt());
                for k in 0..d {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let col = |k: usize| (0..d).map(|i| v[i][order[k]]).collect::<Vec<f64>>();
    ([a[order[0]][order[0]], a[order[1]][order[1]]], trace, [col(0), col(1)])
}

#[test]
fn matches_dense_eigendecomposition() {
    for i in 0..30 {
        let mut r = rng("pca", i);
        let (n, d) = (40, 2 + (i as usize % 10));
        // Anisotropic data so the top two directions are well separated.
        let scales: Vec<f64> = (0..d).map(|k| 3.0 / (1.0 + k as f64)).collect();
        let x: Vec<f64> = normal(&mut r, n * d).iter().enumerate().map(|(e, v)| v * scales[e % d] + 1.0).collect();
        let p = pca_project_2d(&Tensor::new(vec![n, d], x.clone()).unwrap()).unwrap();
        let (vals, trace, vecs) = reference(&x, n, d);
        for k in 0..2 {
            assert!((p.variances[k] - vals[k]).abs() <= 1e-8 * vals[0], "case {i} axis {k}: {:?} vs {vals:?}", p.variances);
            // Coordinates are projections onto the reference direction, up to sign.
            let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|r| x[r * d + j]).sum::<f64>() / n as f64).collect();
            let proj: Vec<f64> = (0..n).map(|r| (0..d).map(|j| (x[r * d + j] - mean[j]) * vecs[k][j]).sum()).collect();
            let sign = if dot(&proj, &p.points.iter().map(|c| c[k]).collect::<Vec<_>>()) < 0.0 { -1.0 } else { 1.0 };
            for (a, b) in proj.iter().zip(&p.points) {
                assert!((sign * a - b[k]).abs() < 1e-6, "case {i} axis {k}");
            }
        }
        assert!((p.total_variance - trace).abs() < 1e-9 * trace);
        assert!(p.explained_ratio() <= 1.0 + 1e-12);
    }
}

#[test]
fn signs_are_deterministic() {
    let mut r = rng("pca.sign", 0);
    let x = normal(&mut r, 30 * 5);
    let p = pca_project_2d(&Tensor::new(vec![30, 5], x.clone()).unwrap()).unwrap();
    for k in 0..2 {
        let peak = p.points.iter().map(|c| c[k]).fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        assert!(peak > 0.0);
    }
    let negated: Vec<f64> = x.iter().map(|v| -v).collect();
    let q = pca_project_2d(&Tensor::new(vec![30, 5], negated).unwrap()).unwrap();
    for (a, b) in p.points.iter().zip(&q.points) {
        assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
    }
}

#[test]
fn separation_of_clustered_points() {
    let tight = [[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]];
    let r = separation_ratio(&tight, &[1, 1, 2, 2]).unwrap();
    assert!(r < 0.05, "{r}");
    let mixed = separation_ratio(&tight, &[1, 2, 1, 2]).unwrap();
    assert!(mixed > 1.0, "{mixed}");
    assert!(separation_ratio(&tight, &[1, 2, 3, 4]).is_err());

    let csv = scatter_csv(&tight[..2], &[1, 1], "stage2");
    assert_eq!(csv, "x,y,id,stage\n0,0,1,stage2\n0.1,0,1,stage2\n");
}
