//! Reference implementations and random generators shared by the
//! integration tests. The oracles work on plain vectors, one element at a
//! time, and do not call into the library.

#![allow(dead_code)]

pub mod criteria;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type TestRng = ChaCha8Rng;

pub fn rng(seed: u64) -> TestRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Values in [-1, 1) with a fixed number of distinct levels when `coarse`,
/// so magnitude and sign ties show up often.
pub fn random_values(rng: &mut TestRng, len: usize, coarse: bool) -> Vec<f32> {
    (0..len)
        .map(|_| {
            if coarse {
                rng.random_range(-3i32..=3) as f32 * 0.5
            } else {
                rng.random_range(-1.0f32..1.0)
            }
        })
        .collect()
}

pub fn random_shape(rng: &mut TestRng, max_side: usize) -> Vec<usize> {
    if rng.random_bool(0.3) {
        vec![rng.random_range(1..=max_side)]
    } else {
        vec![rng.random_range(1..=max_side), rng.random_range(1..=max_side)]
    }
}

/// `ceil(tenths / 10 * numel)` in integers.
pub fn oracle_keep_count(numel: usize, tenths: u32) -> usize {
    (tenths as usize * numel).div_ceil(10)
}

/// Positions of the `k` largest magnitudes, found by sorting; equal
/// magnitudes are ordered by index.
pub fn oracle_topk(values: &[f32], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .abs()
            .partial_cmp(&values[a].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut keep = vec![false; values.len()];
    for &i in order.iter().take(k) {
        keep[i] = true;
    }
    keep
}

/// Trim, elect, disjoint mean, scale, add.
pub fn oracle_ties(pre: &[f32], taus: &[Vec<f32>], tenths: u32, lambda: f64) -> Vec<f32> {
    let k = oracle_keep_count(pre.len(), tenths);
    let masks: Vec<Vec<bool>> = taus.iter().map(|t| oracle_topk(t, k)).collect();
    let mut out = Vec::with_capacity(pre.len());
    for j in 0..pre.len() {
        let mut trimmed = Vec::new();
        for (t, m) in taus.iter().zip(&masks) {
            trimmed.push(if m[j] { t[j] } else { 0.0 });
        }
        let mut positive = 0.0f64;
        let mut negative = 0.0f64;
        for &v in &trimmed {
            if v > 0.0 {
                positive += v as f64;
            } else {
                negative -= v as f64;
            }
        }
        let elected_positive = positive >= negative;
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for &v in &trimmed {
            let agrees = if elected_positive { v > 0.0 } else { v < 0.0 };
            if agrees {
                sum += v as f64;
                count += 1;
            }
        }
        if count == 0 {
            out.push(pre[j]);
        } else {
            out.push((pre[j] as f64 + lambda * sum / count as f64) as f32);
        }
    }
    out
}

pub fn oracle_consensus(pre: &[f32], taus: &[Vec<f32>], lambda: f64, per_task: &[f64]) -> Vec<f32> {
    let mut out = Vec::with_capacity(pre.len());
    for j in 0..pre.len() {
        let mut total = 0.0f64;
        for t in taus {
            total += t[j] as f64;
        }
        let mtl = lambda * total;
        let mut votes = 0;
        for (t, lt) in taus.iter().zip(per_task) {
            let own = t[j] as f64;
            let rest = mtl - own;
            if own.abs() >= rest.abs() * lt {
                votes += 1;
            }
        }
        if votes >= 2 {
            out.push((pre[j] as f64 + mtl) as f32);
        } else {
            out.push(pre[j]);
        }
    }
    out
}

pub fn oracle_stitch(pre: &[f32], taus: &[Vec<f32>], masks: &[Vec<bool>]) -> Vec<f32> {
    (0..pre.len())
        .map(|j| {
            let mut sum = 0.0f64;
            let mut count = 0usize;
            for (t, m) in taus.iter().zip(masks) {
                if m[j] {
                    sum += t[j] as f64;
                    count += 1;
                }
            }
            if count == 0 {
                pre[j]
            } else {
                (pre[j] as f64 + sum / count as f64) as f32
            }
        })
        .collect()
}

/// `sum_i ||X_i W^T - X_i W_i^T||_F^2` with `W` stored row-major as
/// `[out, in]` and each `X_i` as `[samples, in]`.
pub fn regmean_objective(w: &[f64], ws: &[Vec<f64>], xs: &[Vec<f64>], out_dim: usize, in_dim: usize) -> f64 {
    let mut total = 0.0;
    for (wi, x) in ws.iter().zip(xs) {
        let samples = x.len() / in_dim;
        for s in 0..samples {
            for o in 0..out_dim {
                let mut diff = 0.0;
                for c in 0..in_dim {
                    diff += x[s * in_dim + c] * (w[o * in_dim + c] - wi[o * in_dim + c]);
                }
                total += diff * diff;
            }
        }
    }
    total
}

/// `X^T X` for `X` stored as `[samples, in]`.
pub fn gram(x: &[f64], in_dim: usize) -> Vec<f64> {
    let samples = x.len() / in_dim;
    let mut g = vec![0.0; in_dim * in_dim];
    for s in 0..samples {
        for r in 0..in_dim {
            for c in 0..in_dim {
                g[r * in_dim + c] += x[s * in_dim + r] * x[s * in_dim + c];
            }
        }
    }
    g
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}
