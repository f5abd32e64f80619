//! Two-component principal projection by power iteration with deflation.

use alloc::vec;
use alloc::vec::Vec;

pub const POWER_ITERATIONS: usize = 200;
pub const POWER_TOL: f64 = 1e-10;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = libm::sqrt(dot(v, v));
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

/// Covariance-style scatter matrix `X^T X` of the centred rows.
fn scatter(rows: &[Vec<f64>], mean: &[f64]) -> Vec<f64> {
    let d = mean.len();
    let mut s = vec![0.0; d * d];
    for r in rows {
        for i in 0..d {
            let a = r[i] - mean[i];
            for j in 0..d {
                s[i * d + j] += a * (r[j] - mean[j]);
            }
        }
    }
    s
}

pub fn column_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let mut m = vec![0.0; d];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r) {
            *a += b;
        }
    }
    for a in &mut m {
        *a /= rows.len() as f64;
    }
    m
}

/// Leading `k` eigenpairs `(eigenvalue, unit vector)` of the symmetric
/// `d x d` matrix `m`, by power iteration and Hotelling deflation. Iterates
/// are kept orthogonal to the vectors already found.
pub fn top_eigenpairs(m: &[f64], d: usize, k: usize, iterations: usize, tol: f64) -> Vec<(f64, Vec<f64>)> {
    let mut a = m.to_vec();
    let mut out: Vec<(f64, Vec<f64>)> = Vec::with_capacity(k);
    let orthogonalize = |v: &mut [f64], found: &[(f64, Vec<f64>)]| {
        for (_, u) in found {
            let c = dot(v, u);
            for (x, y) in v.iter_mut().zip(u) {
                *x -= c * y;
            }
        }
    };
    for _ in 0..k {
        // Fixed, non-symmetric start so no eigenvector is missed by symmetry.
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.37 * i as f64 + 0.11 * (i * i % 7) as f64).collect();
        orthogonalize(&mut v, &out);
        normalize(&mut v);
        for _ in 0..iterations {
            let mut w = vec![0.0; d];
            for i in 0..d {
                w[i] = dot(&a[i * d..(i + 1) * d], &v);
            }
            orthogonalize(&mut w, &out);
            let n = normalize(&mut w);
            if n == 0.0 {
                break;
            }
            let diff = v.iter().zip(&w).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            v = w;
            if diff < tol {
                break;
            }
        }
        let mut av = vec![0.0; d];
        for i in 0..d {
            av[i] = dot(&a[i * d..(i + 1) * d], &v);
        }
        let lambda = dot(&v, &av);
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        out.push((lambda, v));
    }
    out
}

/// Coordinates of each centred row on the top two principal directions.
pub fn project_2d(rows: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let mean = column_mean(rows);
    let d = mean.len();
    let pcs = top_eigenpairs(&scatter(rows, &mean), d, 2, POWER_ITERATIONS, POWER_TOL);
    rows.iter()
        .map(|r| {
            let c: Vec<f64> = r.iter().zip(&mean).map(|(a, b)| a - b).collect();
            [dot(&c, &pcs[0].1), dot(&c, &pcs[1].1)]
        })
        .collect()
}

/// Euclidean distance between the centroids of two point sets.
pub fn centroid_distance(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let centroid = |s: &[[f64; 2]]| {
        let n = s.len() as f64;
        s.iter().fold([0.0, 0.0], |acc, p| [acc[0] + p[0] / n, acc[1] + p[1] / n])
    };
    let (ca, cb) = (centroid(a), centroid(b));
    libm::sqrt((ca[0] - cb[0]) * (ca[0] - cb[0]) + (ca[1] - cb[1]) * (ca[1] - cb[1]))
}
