//! Independent reference computations shared by the integration tests.
//! Nothing here calls into the library's math so the checks stay honest.

#![allow(dead_code)]

use depthprune::math::RealMatrix;
use depthprune::rng::Lcg;

pub fn cos(u: &[f64], v: &[f64]) -> f64 {
    let mut uv = 0.0;
    let mut uu = 0.0;
    let mut vv = 0.0;
    for (a, b) in u.iter().zip(v) {
        uv += a * b;
        uu += a * a;
        vv += b * b;
    }
    uv / (uu.sqrt() * vv.sqrt())
}

fn to_rows(m: &RealMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn gram(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|a| x.iter().map(|b| a.iter().zip(b).map(|(p, q)| p * q).sum()).collect())
        .collect()
}

/// `H K H` with `H = I - 11ᵀ/n`.
fn double_center(k: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = k.len();
    let row: Vec<f64> = k.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let col: Vec<f64> = (0..n).map(|j| k.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let all = row.iter().sum::<f64>() / n as f64;
    (0..n)
        .map(|i| (0..n).map(|j| k[i][j] - row[i] - col[j] + all).collect())
        .collect()
}

/// `tr(K̃ L̃)` on double-centered Gram matrices.
fn hsic(k: &[Vec<f64>], l: &[Vec<f64>]) -> f64 {
    let (k, l) = (double_center(k), double_center(l));
    let mut t = 0.0;
    for i in 0..k.len() {
        for j in 0..k.len() {
            t += k[i][j] * l[j][i];
        }
    }
    t
}

/// Linear CKA through sample-space Gram matrices.
pub fn hsic_cka(x: &RealMatrix, y: &RealMatrix) -> f64 {
    let (kx, ky) = (gram(&to_rows(x)), gram(&to_rows(y)));
    hsic(&kx, &ky) / (hsic(&kx, &kx) * hsic(&ky, &ky)).sqrt()
}

pub fn random_matrix(rng: &mut Lcg, rows: usize, cols: usize) -> RealMatrix {
    RealMatrix::new(rows, cols, rng.gaussian_vec(rows * cols, 1.0)).unwrap()
}

/// Random orthogonal matrix by Gram–Schmidt on Gaussian columns.
pub fn random_orthogonal(rng: &mut Lcg, n: usize) -> RealMatrix {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v = rng.gaussian_vec(n, 1.0);
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(p, q)| p * q).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    // columns are the basis vectors
    let mut data = vec![0.0; n * n];
    for (j, b) in basis.iter().enumerate() {
        for i in 0..n {
            data[i * n + j] = b[i];
        }
    }
    RealMatrix::new(n, n, data).unwrap()
}

pub fn matmul(a: &RealMatrix, b: &RealMatrix) -> RealMatrix {
    let mut data = vec![0.0; a.rows() * b.cols()];
    for i in 0..a.rows() {
        for k in 0..a.cols() {
            let x = a.get(i, k);
            for j in 0..b.cols() {
                data[i * b.cols() + j] += x * b.get(k, j);
            }
        }
    }
    RealMatrix::new(a.rows(), b.cols(), data).unwrap()
}

pub fn scale(m: &RealMatrix, c: f64) -> RealMatrix {
    RealMatrix::new(m.rows(), m.cols(), m.as_slice().iter().map(|x| x * c).collect()).unwrap()
}

/// Best `k`-subset sum by enumeration.
pub fn best_subset(scores: &[(usize, f64)], k: usize) -> Vec<usize> {
    fn go(scores: &[(usize, f64)], k: usize, start: usize, cur: &mut Vec<usize>, best: &mut (f64, Vec<usize>)) {
        if cur.len() == k {
            let s: f64 = cur.iter().map(|&i| scores[i].1).sum();
            if s > best.0 {
                *best = (s, cur.iter().map(|&i| scores[i].0).collect());
            }
            return;
        }
        for i in start..scores.len() {
            cur.push(i);
            go(scores, k, i + 1, cur, best);
            cur.pop();
        }
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    go(scores, k, 0, &mut Vec::new(), &mut best);
    let mut out = best.1;
    out.sort_unstable();
    out
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}
