//! Loop-by-loop reference implementations and small fixtures shared by the
//! integration tests.
#![allow(dead_code)]

use marnet_core::diffusion::{build_schedule, CdrModel, TimeEmbedding};
use marnet_core::seed::rng_from;
use marnet_core::train::ParamSet;
use marnet_core::Tensor;
use rand::Rng;

pub fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// `-log softmax(row)[y]`
pub fn naive_nll(row: &[f64], y: usize) -> f64 {
    let mut z = 0.0;
    for &v in row {
        z += v.exp();
    }
    z.ln() - row[y]
}

pub fn naive_ce(rows: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (r, &y) in rows.iter().zip(labels) {
        total += naive_nll(r, y);
    }
    total / rows.len() as f64
}

/// Both directional contrastive losses, each averaged over the batch, summed.
pub fn naive_ita(u: &[Vec<f64>], v: &[Vec<f64>], tau: f64) -> f64 {
    let b = u.len();
    let mut s = vec![vec![0.0; b]; b];
    for i in 0..b {
        for j in 0..b {
            s[i][j] = naive_cos(&u[i], &v[j]) / tau;
        }
    }
    let mut v2s = 0.0;
    let mut s2v = 0.0;
    for i in 0..b {
        v2s += naive_nll(&s[i], i);
        let col: Vec<f64> = (0..b).map(|j| s[j][i]).collect();
        s2v += naive_nll(&col, i);
    }
    v2s / b as f64 + s2v / b as f64
}

/// Ties rank the lower class index first.
pub fn naive_topk(rows: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    for (row, &y) in rows.iter().zip(labels) {
        let mut better = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[y] || (v == row[y] && j < y) {
                better += 1;
            }
        }
        if better < k {
            hits += 1;
        }
    }
    hits as f64 / rows.len() as f64
}

pub fn random_rows(rng: &mut impl Rng, n: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-scale..scale)).collect()).collect()
}

pub fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = rng_from(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Overwrites every parameter with `U(-1, 1)` so no unit sits at a kink by accident.
pub fn randomized<M: ParamSet>(model: &mut M, seed: u64) {
    let mut rng = rng_from(seed);
    for t in model.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
}

/// d_v = 3, d_s = 4, C = 3, hidden 8, T = 10.
pub fn small_cdr(alpha2: f64, gamma: f64) -> CdrModel {
    let schedule = build_schedule(10, 1e-3, 0.2).unwrap();
    let temb = TimeEmbedding::new(4).unwrap();
    let mut m = CdrModel::init(3, 4, 3, 8, schedule, temb, &mut rng_from(20)).unwrap();
    randomized(&mut m, 21);
    m.alpha2 = alpha2;
    m.gamma = gamma;
    m
}
