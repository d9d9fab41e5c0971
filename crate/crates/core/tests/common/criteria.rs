//! Numeric checks run both by the core integration tests and by the
//! acceptance target. Each returns a one-line summary on success and a
//! description of the first violation on failure.

#![allow(dead_code)]

use mergeforge::algorithms::{
    consensus_ta, dare_merge, fisher_merge, ls_dataless, model_soup, regmean_merge, task_arithmetic,
    task_vectors, ties_merge, FISHER_EPSILON,
};
use mergeforge::search::{build_plan, SearchOverrides};
use mergeforge::tensor::topk_magnitude_mask;
use mergeforge::{MergeMethod, Tensor};
use rand::Rng;

use super::*;

pub type Outcome = std::result::Result<String, String>;

fn tensor(shape: &[usize], values: Vec<f32>) -> Tensor {
    Tensor::from_f32(shape.to_vec(), values).unwrap()
}

struct Tracker {
    worst: f32,
    tolerance: f32,
    comparisons: usize,
}

impl Tracker {
    fn check(&mut self, what: &str, set: usize, a: &Tensor, b: &Tensor) -> std::result::Result<(), String> {
        let d = max_abs_diff(a.values(), b.values());
        self.worst = self.worst.max(d);
        self.comparisons += 1;
        if d > self.tolerance {
            return Err(format!("{what}: set {set} differs by {d:e}"));
        }
        Ok(())
    }
}

/// The six identities on `sets` random checkpoint sets.
pub fn equivalence_suite(sets: usize, seed: u64) -> Outcome {
    let mut rng = rng(seed);
    let mut t = Tracker {
        worst: 0.0,
        tolerance: 1e-5,
        comparisons: 0,
    };
    for set in 0..sets {
        let n = [2usize, 3, 5][set % 3];
        let mut shapes = vec![vec![rng.random_range(1..=64), rng.random_range(1..=64)]];
        shapes.push(random_shape(&mut rng, 64));
        for shape in shapes {
            let numel: usize = shape.iter().product();
            let pre = tensor(&shape, random_values(&mut rng, numel, false));
            let ft: Vec<Tensor> = (0..n)
                .map(|_| tensor(&shape, random_values(&mut rng, numel, false)))
                .collect();
            let deltas = task_vectors(&pre, &ft).unwrap();
            let soup = model_soup(&ft).unwrap();
            let ta_mean = task_arithmetic(&pre, &deltas, 1.0 / n as f64).unwrap();
            let lambda = rng.random_range(0.1..1.0);
            let ta = task_arithmetic(&pre, &deltas, lambda).unwrap();

            t.check("soup vs TA(1/n)", set, &soup, &ta_mean)?;

            let dare = dare_merge("p", &pre, &deltas, 0.0, lambda, rng.random()).unwrap();
            t.check("DARE(p=0) vs TA", set, &dare, &ta)?;

            let shared: Vec<f32> = (0..numel).map(|_| rng.random_range(0.01f32..2.0)).collect();
            let fisher = vec![tensor(&shape, shared); n];
            t.check(
                "Fisher(uniform) vs soup",
                set,
                &fisher_merge(&ft, &fisher, FISHER_EPSILON).unwrap(),
                &soup,
            )?;

            if shape.len() == 2 {
                let side = shape[1];
                let mut eye = vec![0.0f32; side * side];
                (0..side).for_each(|i| eye[i * side + i] = 1.0);
                let grams = vec![tensor(&[side, side], eye); n];
                let alpha = rng.random_range(0.1..=1.0);
                t.check(
                    "RegMean(I) vs soup",
                    set,
                    &regmean_merge("w", &ft, &grams, alpha).unwrap(),
                    &soup,
                )?;
            }

            t.check(
                "Consensus(lambda_i=0) vs TA",
                set,
                &consensus_ta(&pre, &deltas, lambda, &vec![0.0; n]).unwrap(),
                &ta,
            )?;

            t.check(
                "LS(s=1) vs TA(1/n)",
                set,
                &ls_dataless(&pre, &deltas, 1.0).unwrap(),
                &ta_mean,
            )?;
        }
    }
    Ok(format!(
        "{sets} sets, {} comparisons, max abs diff {:.2e}",
        t.comparisons, t.worst
    ))
}

/// TIES and Consensus TA against the scalar oracles, and top-k masks
/// against the sort oracle, on `instances` small random problems.
pub fn brute_force_oracles(instances: usize, seed: u64) -> Outcome {
    let mut rng = rng(seed);
    let mut masks_checked = 0;
    for case in 0..instances {
        let numel = rng.random_range(1..=8);
        let n = rng.random_range(2..=3);
        let coarse = rng.random_bool(0.5);
        let pre = random_values(&mut rng, numel, coarse);
        let taus: Vec<Vec<f32>> = (0..n).map(|_| random_values(&mut rng, numel, coarse)).collect();
        let tenths = rng.random_range(1..=10u32);
        let lambda = rng.random_range(1..=10) as f64 / 10.0;
        let per_task: Vec<f64> = (0..n).map(|_| rng.random_range(0..=10) as f64 / 10.0).collect();

        let pre_t = tensor(&[numel], pre.clone());
        let taus_t: Vec<Tensor> = taus.iter().map(|t| tensor(&[numel], t.clone())).collect();

        for tau in &taus {
            let k = oracle_keep_count(numel, tenths);
            let got = topk_magnitude_mask(&tensor(&[numel], tau.clone()), tenths as f64 / 10.0).unwrap();
            if got.to_bools() != oracle_topk(tau, k) {
                return Err(format!("top-k case {case}: {tau:?} keep {tenths}/10"));
            }
            masks_checked += 1;
        }

        let ties = ties_merge(&pre_t, &taus_t, tenths as f64 / 10.0, lambda).unwrap();
        let expected = oracle_ties(&pre, &taus, tenths, lambda);
        if ties.values() != expected.as_slice() {
            return Err(format!(
                "TIES case {case}: got {:?}, oracle {expected:?} (pre {pre:?}, taus {taus:?}, s {tenths}/10, lambda {lambda})",
                ties.values()
            ));
        }

        let cons = consensus_ta(&pre_t, &taus_t, lambda, &per_task).unwrap();
        let expected = oracle_consensus(&pre, &taus, lambda, &per_task);
        if cons.values() != expected.as_slice() {
            return Err(format!(
                "Consensus case {case}: got {:?}, oracle {expected:?} (pre {pre:?}, taus {taus:?}, lambda {lambda}, lambda_i {per_task:?})",
                cons.values()
            ));
        }
    }
    Ok(format!("{instances} TIES + {instances} Consensus instances exact, {masks_checked} top-k masks"))
}

/// Mean of DARE over `seeds` seeds stays within 4 sigma / sqrt(seeds) of task
/// arithmetic at every element.
pub fn dare_unbiased(seeds: u64, drop_rates: &[f64], seed: u64) -> Outcome {
    let mut rng = rng(seed);
    let (n, numel, lambda) = (3usize, 32usize, 0.7f64);
    let pre = tensor(&[numel], random_values(&mut rng, numel, false));
    let taus: Vec<Vec<f32>> = (0..n).map(|_| random_values(&mut rng, numel, false)).collect();
    let deltas: Vec<Tensor> = taus.iter().map(|t| tensor(&[numel], t.clone())).collect();
    let ta = task_arithmetic(&pre, &deltas, lambda).unwrap();
    let mut worst = 0.0f64;
    for &p in drop_rates {
        let mut mean = vec![0.0f64; numel];
        for s in 0..seeds {
            let out = dare_merge("layers.0.w", &pre, &deltas, p, lambda, s).unwrap();
            for (m, v) in mean.iter_mut().zip(out.values()) {
                *m += *v as f64 / seeds as f64;
            }
        }
        for j in 0..numel {
            let var: f64 = taus.iter().map(|t| (t[j] as f64).powi(2)).sum::<f64>() * p / (1.0 - p);
            let sigma = lambda * var.sqrt();
            let bound = 4.0 * sigma / (seeds as f64).sqrt() + 1e-6;
            let err = (mean[j] - ta.values()[j] as f64).abs();
            worst = worst.max(err / bound);
            if err > bound {
                return Err(format!("p={p}, element {j}: |mean - TA| = {err:e} > {bound:e}"));
            }
        }
    }
    Ok(format!(
        "{seeds} seeds x p in {drop_rates:?}; worst deviation {:.2} of the 4-sigma bound",
        worst
    ))
}

/// The closed-form RegMean solution is no worse than `perturbations` random
/// perturbations of it, on `instances` random n=3 problems with 4x4 weights.
pub fn regmean_optimality(instances: usize, perturbations: usize, seed: u64) -> Outcome {
    let mut rng = rng(seed);
    let (n, dim, samples) = (3usize, 4usize, 10usize);
    let mut min_gap = f64::INFINITY;
    for case in 0..instances {
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..samples * dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let ws_f32: Vec<Vec<f32>> = (0..n).map(|_| random_values(&mut rng, dim * dim, false)).collect();
        let ws: Vec<Vec<f64>> = ws_f32.iter().map(|w| w.iter().map(|&v| v as f64).collect()).collect();
        let weights: Vec<Tensor> = ws_f32.iter().map(|w| tensor(&[dim, dim], w.clone())).collect();
        let grams: Vec<Tensor> = xs
            .iter()
            .map(|x| tensor(&[dim, dim], gram(x, dim).into_iter().map(|v| v as f32).collect()))
            .collect();
        let merged = regmean_merge("w", &weights, &grams, 1.0).unwrap();
        let best: Vec<f64> = merged.values().iter().map(|&v| v as f64).collect();
        let base = regmean_objective(&best, &ws, &xs, dim, dim);
        for _ in 0..perturbations {
            let scale = 10f64.powf(rng.random_range(-3.0..0.0));
            let moved: Vec<f64> = best.iter().map(|v| v + scale * rng.random_range(-1.0..1.0)).collect();
            let obj = regmean_objective(&moved, &ws, &xs, dim, dim);
            min_gap = min_gap.min(obj - base);
            if obj < base {
                return Err(format!("case {case}: perturbation lowers objective {base} -> {obj}"));
            }
        }
    }
    Ok(format!(
        "{instances} instances x {perturbations} perturbations, smallest objective increase {min_gap:.3e}"
    ))
}

/// Default search plans have the expected number of runs for five tasks.
pub fn grid_fidelity() -> Outcome {
    use MergeMethod::*;
    let expected = [
        (TaskArithmetic, 10),
        (RegMean, 5),
        (Ties, 30),
        (Dare, 30),
        (ConsensusTa, 35),
        (LsDataless, 5),
        (ModelSoup, 0),
        (Fisher, 0),
        (LsTrained, 0),
    ];
    let mut parts = Vec::new();
    for (method, want) in expected {
        let got = build_plan(method, &SearchOverrides::default(), 5)
            .map_err(|e| e.to_string())?
            .run_count();
        if got != want {
            return Err(format!("{method}: {got} runs, expected {want}"));
        }
        parts.push(format!("{method} {got}"));
    }
    Ok(parts.join(", "))
}
