//! The merge methods.
//!
//! Every method is a per-parameter transform. The public functions take
//! tensors by reference and return a fresh tensor; [`merge_group`] runs the
//! same kernels in place on an owned [`ParamGroup`] so the streaming pipeline
//! never holds more than the group's own buffers.
//!
//! Shared conventions:
//! - Per-element sums are accumulated in `f64` and rounded once to the
//!   output dtype (the pretrained tensor's dtype).
//! - Top-k sparsity is per tensor: `k = ceil(s * numel)`, magnitude ties go
//!   to the lower flat index.
//! - Sign election picks +1 when positive and negative mass are equal.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ParamGroup, ParamKey};
use crate::error::{Error, Result};
use crate::par::for_each_chunk_mut;
use crate::rng::ElementStream;
use crate::tensor::{elect_sign_at, keep_count, topk_mask_values, BinaryMask, Tensor};

/// Relative floor added to Fisher weights; see [`fisher_merge`].
pub const FISHER_EPSILON: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    ModelSoup,
    TaskArithmetic,
    Fisher,
    #[serde(rename = "regmean")]
    RegMean,
    Ties,
    Dare,
    ConsensusTa,
    LsDataless,
    LsTrained,
}

impl MergeMethod {
    pub const ALL: [MergeMethod; 9] = [
        MergeMethod::ModelSoup,
        MergeMethod::TaskArithmetic,
        MergeMethod::Fisher,
        MergeMethod::RegMean,
        MergeMethod::Ties,
        MergeMethod::Dare,
        MergeMethod::ConsensusTa,
        MergeMethod::LsDataless,
        MergeMethod::LsTrained,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MergeMethod::ModelSoup => "model_soup",
            MergeMethod::TaskArithmetic => "task_arithmetic",
            MergeMethod::Fisher => "fisher",
            MergeMethod::RegMean => "regmean",
            MergeMethod::Ties => "ties",
            MergeMethod::Dare => "dare",
            MergeMethod::ConsensusTa => "consensus_ta",
            MergeMethod::LsDataless => "ls_dataless",
            MergeMethod::LsTrained => "ls_trained",
        }
    }

    /// Whether the method reads a statistics bundle.
    pub fn needs_stats(self) -> bool {
        matches!(
            self,
            MergeMethod::Fisher | MergeMethod::RegMean | MergeMethod::LsTrained
        )
    }

    /// Methods that combine finetuned weights directly rather than task
    /// vectors.
    fn works_on_weights(self) -> bool {
        matches!(
            self,
            MergeMethod::ModelSoup | MergeMethod::Fisher | MergeMethod::RegMean
        )
    }
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        let m = match norm.as_str() {
            "model_soup" | "soup" => MergeMethod::ModelSoup,
            "task_arithmetic" | "ta" => MergeMethod::TaskArithmetic,
            "fisher" | "fisher_merging" => MergeMethod::Fisher,
            "regmean" | "reg_mean" => MergeMethod::RegMean,
            "ties" | "ties_merging" => MergeMethod::Ties,
            "dare" => MergeMethod::Dare,
            "consensus_ta" | "consensus" => MergeMethod::ConsensusTa,
            "ls_dataless" | "dataless_ls" | "localize_and_stitch_dataless" => {
                MergeMethod::LsDataless
            }
            "ls_trained" | "localize_and_stitch" | "ls" => MergeMethod::LsTrained,
            _ => return Err(Error::UnknownMethod(s.to_string())),
        };
        Ok(m)
    }
}

/// A merge method with its hyperparameters.
///
/// Only the fields the method uses may be set:
///
/// | method            | required                    | optional     |
/// |-------------------|-----------------------------|--------------|
/// | `model_soup`      |                             |              |
/// | `task_arithmetic` | `lambda`                    |              |
/// | `fisher`          |                             | `stats_path` |
/// | `regmean`         | `alpha`                     | `stats_path` |
/// | `ties`            | `sparsity`, `lambda`        |              |
/// | `dare`            | `drop_rate`, `lambda`       | `seed` (0)   |
/// | `consensus_ta`    | `lambda`, `per_task_lambda` |              |
/// | `ls_dataless`     | `sparsity`                  |              |
/// | `ls_trained`      |                             | `stats_path` |
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeRecipe {
    pub method: MergeMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_task_lambda: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl MergeRecipe {
    pub fn bare(method: MergeMethod) -> Self {
        MergeRecipe {
            method,
            lambda: None,
            per_task_lambda: None,
            drop_rate: None,
            sparsity: None,
            alpha: None,
            stats_path: None,
            seed: None,
        }
    }

    pub fn model_soup() -> Self {
        Self::bare(MergeMethod::ModelSoup)
    }

    pub fn task_arithmetic(lambda: f64) -> Self {
        MergeRecipe {
            lambda: Some(lambda),
            ..Self::bare(MergeMethod::TaskArithmetic)
        }
    }

    pub fn fisher() -> Self {
        Self::bare(MergeMethod::Fisher)
    }

    pub fn regmean(alpha: f64) -> Self {
        MergeRecipe {
            alpha: Some(alpha),
            ..Self::bare(MergeMethod::RegMean)
        }
    }

    pub fn ties(sparsity: f64, lambda: f64) -> Self {
        MergeRecipe {
            sparsity: Some(sparsity),
            lambda: Some(lambda),
            ..Self::bare(MergeMethod::Ties)
        }
    }

    pub fn dare(drop_rate: f64, lambda: f64, seed: u64) -> Self {
        MergeRecipe {
            drop_rate: Some(drop_rate),
            lambda: Some(lambda),
            seed: Some(seed),
            ..Self::bare(MergeMethod::Dare)
        }
    }

    pub fn consensus_ta(lambda: f64, per_task_lambda: Vec<f64>) -> Self {
        MergeRecipe {
            lambda: Some(lambda),
            per_task_lambda: Some(per_task_lambda),
            ..Self::bare(MergeMethod::ConsensusTa)
        }
    }

    pub fn ls_dataless(sparsity: f64) -> Self {
        MergeRecipe {
            sparsity: Some(sparsity),
            ..Self::bare(MergeMethod::LsDataless)
        }
    }

    pub fn ls_trained() -> Self {
        Self::bare(MergeMethod::LsTrained)
    }

    pub fn with_stats(mut self, path: impl Into<PathBuf>) -> Self {
        self.stats_path = Some(path.into());
        self
    }

    /// DARE's seed, defaulting to 0.
    pub fn effective_seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Checks field presence and ranges. `n_tasks`, when known, is checked
    /// against the length of `per_task_lambda`.
    pub fn validate(&self, n_tasks: Option<usize>) -> Result<()> {
        use MergeMethod::*;
        let m = self.method;
        let bad = |msg: String| Err(Error::InvalidRecipe(format!("{m}: {msg}")));

        let allowed: &[&str] = match m {
            ModelSoup => &[],
            TaskArithmetic => &["lambda"],
            Fisher | LsTrained => &["stats_path"],
            RegMean => &["alpha", "stats_path"],
            Ties => &["sparsity", "lambda"],
            Dare => &["drop_rate", "lambda", "seed"],
            ConsensusTa => &["lambda", "per_task_lambda"],
            LsDataless => &["sparsity"],
        };
        let required: &[&str] = match m {
            ModelSoup | Fisher | LsTrained => &[],
            TaskArithmetic => &["lambda"],
            RegMean => &["alpha"],
            Ties => &["sparsity", "lambda"],
            Dare => &["drop_rate", "lambda"],
            ConsensusTa => &["lambda", "per_task_lambda"],
            LsDataless => &["sparsity"],
        };
        let present = [
            ("lambda", self.lambda.is_some()),
            ("per_task_lambda", self.per_task_lambda.is_some()),
            ("drop_rate", self.drop_rate.is_some()),
            ("sparsity", self.sparsity.is_some()),
            ("alpha", self.alpha.is_some()),
            ("stats_path", self.stats_path.is_some()),
            ("seed", self.seed.is_some()),
        ];
        for (field, set) in present {
            if set && !allowed.contains(&field) {
                return bad(format!("field `{field}` does not apply to this method"));
            }
            if !set && required.contains(&field) {
                return bad(format!("missing required field `{field}`"));
            }
        }

        if let Some(l) = self.lambda {
            if !(l.is_finite() && l > 0.0) {
                return bad(format!("lambda must be > 0, got {l}"));
            }
        }
        if let Some(p) = self.drop_rate {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("drop_rate must be in [0, 1), got {p}"));
            }
        }
        if let Some(s) = self.sparsity {
            if !(s > 0.0 && s <= 1.0) {
                return bad(format!("sparsity must be in (0, 1], got {s}"));
            }
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a <= 1.0) {
                return bad(format!("alpha must be in (0, 1], got {a}"));
            }
        }
        if let Some(ls) = &self.per_task_lambda {
            if let Some(bad_l) = ls.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
                return bad(format!("per_task_lambda entries must be >= 0, got {bad_l}"));
            }
            if let Some(n) = n_tasks {
                if ls.len() != n {
                    return bad(format!(
                        "per_task_lambda has {} entries for {n} tasks",
                        ls.len()
                    ));
                }
            }
        }
        if m == ConsensusTa {
            if let Some(n) = n_tasks {
                if n < 2 {
                    return Err(Error::ConsensusRequiresTwoTasks(n));
                }
            }
        }
        Ok(())
    }
}

/// Task vectors for one parameter: `tau_i = theta_ft_i - theta_pre`.
#[derive(Debug, Clone)]
pub struct TaskVectorGroup {
    pub key: ParamKey,
    pub deltas: Vec<Tensor>,
}

impl TaskVectorGroup {
    pub fn from_group(group: &ParamGroup) -> Result<Self> {
        Ok(TaskVectorGroup {
            key: group.key.clone(),
            deltas: task_vectors(&group.pretrained, &group.finetuned)?,
        })
    }
}

/// `theta_ft_i - theta_pre` for each finetuned tensor, in `f32`.
pub fn task_vectors(pretrained: &Tensor, finetuned: &[Tensor]) -> Result<Vec<Tensor>> {
    finetuned
        .iter()
        .map(|ft| {
            pretrained.check_same_shape(ft, "task vector")?;
            let mut delta = ft.clone().cast(crate::tensor::DType::F32);
            delta
                .values_mut()
                .iter_mut()
                .zip(pretrained.values())
                .for_each(|(d, &p)| *d -= p);
            Ok(delta)
        })
        .collect()
}

fn check_inputs(reference: &Tensor, others: &[Tensor], what: &'static str) -> Result<()> {
    if others.is_empty() {
        return Err(Error::EmptyInput { what });
    }
    for t in others {
        reference.check_same_shape(t, what)?;
    }
    Ok(())
}

fn slices(ts: &[Tensor]) -> Vec<&[f32]> {
    ts.iter().map(Tensor::values).collect()
}

/// Runs `kernel` on a copy of `base` and rounds to its dtype.
fn run_on_copy(base: &Tensor, kernel: impl FnOnce(&mut [f32]) -> Result<()>) -> Result<Tensor> {
    let mut out = base.clone();
    kernel(out.values_mut())?;
    out.round_to_dtype();
    Ok(out)
}

// ---------------------------------------------------------------------------
// In-place kernels. `out` holds the pretrained values on entry (or is scratch
// for methods that ignore them) and the merged values on exit.
// ---------------------------------------------------------------------------

fn soup_kernel(out: &mut [f32], weights: &[&[f32]]) {
    let n = weights.len() as f64;
    for_each_chunk_mut(out, |off, chunk| {
        for (k, o) in chunk.iter_mut().enumerate() {
            let j = off + k;
            let sum: f64 = weights.iter().map(|w| w[j] as f64).sum();
            *o = (sum / n) as f32;
        }
    });
}

fn scaled_sum_kernel(out: &mut [f32], deltas: &[&[f32]], lambda: f64, scale: f64) {
    for_each_chunk_mut(out, |off, chunk| {
        for (k, o) in chunk.iter_mut().enumerate() {
            let j = off + k;
            let sum: f64 = deltas.iter().map(|d| d[j] as f64 * scale).sum();
            *o = (*o as f64 + lambda * sum) as f32;
        }
    });
}

fn fisher_kernel(out: &mut [f32], weights: &[&[f32]], fisher: &[&[f32]], eps_rel: f64) {
    let n = weights.len() as f64;
    let max_total = (0..out.len())
        .map(|j| fisher.iter().map(|f| f[j] as f64).sum::<f64>())
        .fold(0.0f64, f64::max);
    let eps = if max_total > 0.0 { eps_rel * max_total } else { 1.0 };
    for_each_chunk_mut(out, |off, chunk| {
        for (k, o) in chunk.iter_mut().enumerate() {
            let j = off + k;
            let (mut num, mut den, mut sum) = (0.0f64, 0.0f64, 0.0f64);
            for (w, f) in weights.iter().zip(fisher) {
                let (w, f) = (w[j] as f64, f[j] as f64);
                num += f * w;
                den += f;
                sum += w;
            }
            *o = ((num + eps * sum / n) / (den + eps)) as f32;
        }
    });
}

fn ties_kernel(out: &mut [f32], deltas: &[&[f32]], masks: &[BinaryMask], lambda: f64) {
    for_each_chunk_mut(out, |off, chunk| {
        for (k, o) in chunk.iter_mut().enumerate() {
            let j = off + k;
            let trimmed = deltas
                .iter()
                .zip(masks)
                .map(|(d, m)| if m.get(j) { d[j] } else { 0.0 });
            let sign = elect_sign_at(trimmed.clone());
            let (mut sum, mut count) = (0.0f64, 0usize);
            for v in trimmed {
                if v * sign > 0.0 {
                    sum += v as f64;
                    count += 1;
                }
            }
            if count > 0 {
                *o = (*o as f64 + lambda * sum / count as f64) as f32;
            }
        }
    });
}

fn dare_kernel(out: &mut [f32], deltas: &[&[f32]], streams: &[ElementStream], p: f64, lambda: f64) {
    let scale = 1.0 / (1.0 - p);
    for_each_chunk_mut(out, |off, chunk| {
        for (k, o) in chunk.iter_mut().enumerate() {
            let j = off + k;
            let sum: f64 = deltas
                .iter()
                .zip(streams)
                .map(|(d, s)| {
                    if s.bernoulli_at(j as u64, p) {
                        0.0
                    } else {
                        d[j] as f64 * scale
                    }
                })
                .sum();
            *o = (*o as f64 + lambda * sum) as f32;
        }
    });
}

/// Scaled multi-task vector at `j` and the number of tasks voting for it.
#[inline]
fn consensus_at(deltas: &[&[f32]], j: usize, lambda: f64, per_task: &[f64]) -> (f64, usize) {
    let mtl = lambda * deltas.iter().map(|d| d[j] as f64).sum::<f64>();
    let votes = deltas
        .iter()
        .zip(per_task)
        .filter(|(d, &lt)| {
            let t = d[j] as f64;
            t.abs() >= (mtl - t).abs() * lt
        })
        .count();
    (mtl, votes)
}

fn consensus_kernel(out: &mut [f32], deltas: &[&[f32]], lambda: f64, per_task: &[f64]) {
    for_each_chunk_mut(out, |off, chunk| {
        for (k, o) in chunk.iter_mut().enumerate() {
            let (mtl, agree) = consensus_at(deltas, off + k, lambda, per_task);
            if agree >= 2 {
                *o = (*o as f64 + mtl) as f32;
            }
        }
    });
}

fn stitch_kernel(out: &mut [f32], deltas: &[&[f32]], masks: &[BinaryMask]) {
    for_each_chunk_mut(out, |off, chunk| {
        for (k, o) in chunk.iter_mut().enumerate() {
            let j = off + k;
            let (mut sum, mut count) = (0.0f64, 0usize);
            for (d, m) in deltas.iter().zip(masks) {
                if m.get(j) {
                    sum += d[j] as f64;
                    count += 1;
                }
            }
            if count > 0 {
                *o = (*o as f64 + sum / count as f64) as f32;
            }
        }
    });
}

fn topk_masks(shape: &[usize], deltas: &[&[f32]], keep: f64) -> Result<Vec<BinaryMask>> {
    let numel = deltas.first().map_or(0, |d| d.len());
    let k = keep_count(numel, keep)?;
    Ok(deltas
        .iter()
        .map(|d| topk_mask_values(shape.to_vec(), d, k))
        .collect())
}

// ---------------------------------------------------------------------------
// Public per-parameter methods.
// ---------------------------------------------------------------------------

/// Elementwise mean of the finetuned tensors.
pub fn model_soup(finetuned: &[Tensor]) -> Result<Tensor> {
    let first = finetuned.first().ok_or(Error::EmptyInput { what: "model soup" })?;
    check_inputs(first, finetuned, "model soup")?;
    run_on_copy(first, |out| {
        soup_kernel(out, &slices(finetuned));
        Ok(())
    })
}

/// `theta_pre + lambda * sum_i tau_i`.
pub fn task_arithmetic(pretrained: &Tensor, deltas: &[Tensor], lambda: f64) -> Result<Tensor> {
    check_inputs(pretrained, deltas, "task arithmetic")?;
    run_on_copy(pretrained, |out| {
        scaled_sum_kernel(out, &slices(deltas), lambda, 1.0);
        Ok(())
    })
}

/// Fisher-weighted average of the finetuned tensors:
/// `(sum_i F_i theta_i + eps * mean_i theta_i) / (sum_i F_i + eps)`.
///
/// `eps = eps_rel * max_j sum_i F_ij`, so positions where every Fisher value
/// is zero fall back to the plain mean; an all-zero tensor uses `eps = 1`.
pub fn fisher_merge(finetuned: &[Tensor], fisher: &[Tensor], eps_rel: f64) -> Result<Tensor> {
    let first = finetuned.first().ok_or(Error::EmptyInput { what: "Fisher merge" })?;
    check_inputs(first, finetuned, "Fisher merge")?;
    check_inputs(first, fisher, "Fisher weights")?;
    if fisher.len() != finetuned.len() {
        return Err(Error::InvalidStats(format!(
            "{} Fisher tensors for {} models",
            fisher.len(),
            finetuned.len()
        )));
    }
    for (task, f) in fisher.iter().enumerate() {
        if let Some((index, &value)) = f.values().iter().enumerate().find(|(_, v)| **v < 0.0) {
            return Err(Error::NegativeFisher {
                key: String::new(),
                task: task.to_string(),
                index,
                value,
            });
        }
    }
    run_on_copy(first, |out| {
        fisher_kernel(out, &slices(finetuned), &slices(fisher), eps_rel);
        Ok(())
    })
}

/// Scales the off-diagonal entries of a Gram matrix by `alpha`.
fn reduce_gram(gram: &Tensor, alpha: f64) -> DMatrix<f64> {
    let side = gram.shape()[0];
    let v = gram.values();
    DMatrix::from_fn(side, side, |r, c| {
        let g = v[r * side + c] as f64;
        if r == c {
            g
        } else {
            alpha * g
        }
    })
}

/// RegMean for one linear weight stored as `[out, in]`:
/// `W^T = (sum_i G~_i)^-1 sum_i G~_i W_i^T`, where `G~_i` is the `[in, in]`
/// Gram matrix with off-diagonal entries scaled by `alpha`.
///
/// Solved with a Cholesky factorization; if that fails, diagonal jitter of
/// `1e-6 * trace / in` is added and an LU solve is the last resort.
pub fn regmean_merge(key: &str, weights: &[Tensor], grams: &[Tensor], alpha: f64) -> Result<Tensor> {
    let first = weights.first().ok_or(Error::EmptyInput { what: "RegMean" })?;
    check_inputs(first, weights, "RegMean")?;
    let (rows, cols) = match first.shape() {
        [r, c] => (*r, *c),
        other => {
            return Err(Error::GramShapeMismatch {
                key: key.to_string(),
                side: 0,
                found: other.to_vec(),
            })
        }
    };
    if grams.len() != weights.len() {
        return Err(Error::InvalidStats(format!(
            "{} Gram matrices for {} models at {key}",
            grams.len(),
            weights.len()
        )));
    }
    for g in grams {
        if g.shape() != [cols, cols] {
            return Err(Error::GramShapeMismatch {
                key: key.to_string(),
                side: cols,
                found: g.shape().to_vec(),
            });
        }
    }

    let mut lhs = DMatrix::<f64>::zeros(cols, cols);
    let mut rhs = DMatrix::<f64>::zeros(cols, rows);
    for (w, g) in weights.iter().zip(grams) {
        let g = reduce_gram(g, alpha);
        // W_i^T as an [in, out] matrix; values are row-major [out, in].
        let wt = DMatrix::from_column_slice(cols, rows, &w.values().iter().map(|&x| x as f64).collect::<Vec<_>>());
        rhs += &g * wt;
        lhs += g;
    }

    let solution = solve_symmetric(lhs, &rhs).ok_or_else(|| Error::SolverFailure {
        key: key.to_string(),
    })?;
    // solution is W^T ([in, out], column-major) == W row-major.
    let data: Vec<f32> = solution.as_slice().iter().map(|&x| x as f32).collect();
    let mut out = Tensor::new(vec![rows, cols], first.dtype(), data)?;
    out.round_to_dtype();
    Ok(out)
}

fn solve_symmetric(lhs: DMatrix<f64>, rhs: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let finite = |m: &DMatrix<f64>| m.iter().all(|x| x.is_finite());
    if let Some(ch) = lhs.clone().cholesky() {
        let x = ch.solve(rhs);
        if finite(&x) {
            return Some(x);
        }
    }
    let dim = lhs.nrows().max(1) as f64;
    let jitter = 1e-6 * lhs.trace().abs() / dim;
    let jitter = if jitter > 0.0 { jitter } else { 1e-6 };
    let mut jittered = lhs;
    for i in 0..jittered.nrows() {
        jittered[(i, i)] += jitter;
    }
    if let Some(ch) = jittered.clone().cholesky() {
        let x = ch.solve(rhs);
        if finite(&x) {
            return Some(x);
        }
    }
    jittered.lu().solve(rhs).filter(finite)
}

/// TIES: trim each task vector to its top-`sparsity` fraction by magnitude,
/// elect a sign per position, average the surviving values that agree with
/// it, and add `lambda` times the result to `theta_pre`.
pub fn ties_merge(pretrained: &Tensor, deltas: &[Tensor], sparsity: f64, lambda: f64) -> Result<Tensor> {
    check_inputs(pretrained, deltas, "TIES")?;
    let d = slices(deltas);
    let masks = topk_masks(pretrained.shape(), &d, sparsity)?;
    run_on_copy(pretrained, |out| {
        ties_kernel(out, &d, &masks, lambda);
        Ok(())
    })
}

fn dare_streams(key: &str, n: usize, seed: u64) -> Vec<ElementStream> {
    (0..n).map(|i| ElementStream::new(seed, i, key)).collect()
}

/// DARE: drop each task-vector entry with probability `drop_rate`, rescale
/// survivors by `1 / (1 - drop_rate)`, then apply task arithmetic. Draws are
/// keyed by (seed, task index, `key`, element index).
pub fn dare_merge(
    key: &str,
    pretrained: &Tensor,
    deltas: &[Tensor],
    drop_rate: f64,
    lambda: f64,
    seed: u64,
) -> Result<Tensor> {
    check_inputs(pretrained, deltas, "DARE")?;
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(Error::InvalidRecipe(format!("drop_rate {drop_rate} outside [0, 1)")));
    }
    let streams = dare_streams(key, deltas.len(), seed);
    run_on_copy(pretrained, |out| {
        dare_kernel(out, &slices(deltas), &streams, drop_rate, lambda);
        Ok(())
    })
}

/// Consensus task arithmetic. With `tau_mtl = lambda * sum_i tau_i`, task `i`
/// votes for a position when `|tau_i| >= |tau_mtl - tau_i| * per_task[i]`;
/// positions with at least two votes receive `tau_mtl`.
pub fn consensus_ta(pretrained: &Tensor, deltas: &[Tensor], lambda: f64, per_task: &[f64]) -> Result<Tensor> {
    check_inputs(pretrained, deltas, "consensus TA")?;
    if deltas.len() < 2 {
        return Err(Error::ConsensusRequiresTwoTasks(deltas.len()));
    }
    if per_task.len() != deltas.len() {
        return Err(Error::InvalidRecipe(format!(
            "{} per-task lambdas for {} task vectors",
            per_task.len(),
            deltas.len()
        )));
    }
    run_on_copy(pretrained, |out| {
        consensus_kernel(out, &slices(deltas), lambda, per_task);
        Ok(())
    })
}

/// Per position, how many tasks vote for keeping it in consensus TA.
pub fn consensus_votes(deltas: &[Tensor], lambda: f64, per_task: &[f64]) -> Result<Vec<u8>> {
    let first = deltas.first().ok_or(Error::EmptyInput { what: "consensus votes" })?;
    check_inputs(first, deltas, "consensus votes")?;
    if per_task.len() != deltas.len() {
        return Err(Error::InvalidRecipe(format!(
            "{} per-task lambdas for {} task vectors",
            per_task.len(),
            deltas.len()
        )));
    }
    let d = slices(deltas);
    Ok((0..first.numel())
        .map(|j| consensus_at(&d, j, lambda, per_task).1.min(u8::MAX as usize) as u8)
        .collect())
}

/// Dataless Localize-and-Stitch: keep each task vector's top-`sparsity`
/// entries and stitch them onto `theta_pre`, averaging where regions overlap.
pub fn ls_dataless(pretrained: &Tensor, deltas: &[Tensor], sparsity: f64) -> Result<Tensor> {
    check_inputs(pretrained, deltas, "Localize-and-Stitch")?;
    let d = slices(deltas);
    let masks = topk_masks(pretrained.shape(), &d, sparsity)?;
    run_on_copy(pretrained, |out| {
        stitch_kernel(out, &d, &masks);
        Ok(())
    })
}

/// Localize-and-Stitch with supplied (trained) masks.
pub fn ls_trained(pretrained: &Tensor, deltas: &[Tensor], masks: &[BinaryMask]) -> Result<Tensor> {
    check_inputs(pretrained, deltas, "Localize-and-Stitch")?;
    if masks.len() != deltas.len() {
        return Err(Error::InvalidStats(format!(
            "{} masks for {} task vectors",
            masks.len(),
            deltas.len()
        )));
    }
    for m in masks {
        if m.shape() != pretrained.shape() {
            return Err(Error::shape("stitch mask", pretrained.shape(), m.shape()));
        }
    }
    run_on_copy(pretrained, |out| {
        stitch_kernel(out, &slices(deltas), masks);
        Ok(())
    })
}

/// Per-parameter statistics handed to [`merge_group`].
#[derive(Debug, Clone, Default)]
pub enum GroupStats {
    #[default]
    None,
    Fisher(Vec<Tensor>),
    /// Gram matrices, already normalized; `None` means this parameter has no
    /// statistics and is averaged instead.
    Gram(Option<Vec<Tensor>>),
    Masks(Vec<BinaryMask>),
}

/// Merges one parameter group, reusing its buffers: task vectors are formed
/// in the finetuned tensors and the result is written over the pretrained
/// tensor, which is returned.
pub fn merge_group(recipe: &MergeRecipe, group: ParamGroup, stats: GroupStats) -> Result<Tensor> {
    use MergeMethod::*;
    let ParamGroup {
        key,
        pretrained: mut out,
        finetuned: mut inputs,
    } = group;
    let n = inputs.len();
    check_inputs(&out, &inputs, "parameter group")?;

    if !recipe.method.works_on_weights() {
        for ft in &mut inputs {
            ft.values_mut()
                .iter_mut()
                .zip(out.values())
                .for_each(|(d, &p)| *d -= p);
        }
    }
    let d = slices(&inputs);
    let lambda = recipe.lambda.unwrap_or(1.0);

    match recipe.method {
        ModelSoup => soup_kernel(out.values_mut(), &d),
        TaskArithmetic => scaled_sum_kernel(out.values_mut(), &d, lambda, 1.0),
        Fisher => {
            let GroupStats::Fisher(fisher) = stats else {
                return Err(missing("fisher_diag", &key));
            };
            check_inputs(&out, &fisher, "Fisher weights")?;
            fisher_kernel(out.values_mut(), &d, &slices(&fisher), FISHER_EPSILON);
        }
        RegMean => match stats {
            GroupStats::Gram(Some(grams)) if out.shape().len() == 2 => {
                let alpha = recipe.alpha.unwrap_or(1.0);
                drop(d);
                return regmean_merge(key.as_str(), &inputs, &grams, alpha);
            }
            _ => soup_kernel(out.values_mut(), &d),
        },
        Ties => {
            let masks = topk_masks(out.shape(), &d, recipe.sparsity.unwrap_or(1.0))?;
            ties_kernel(out.values_mut(), &d, &masks, lambda);
        }
        Dare => {
            let p = recipe.drop_rate.unwrap_or(0.0);
            let streams = dare_streams(key.as_str(), n, recipe.effective_seed());
            dare_kernel(out.values_mut(), &d, &streams, p, lambda);
        }
        ConsensusTa => {
            if n < 2 {
                return Err(Error::ConsensusRequiresTwoTasks(n));
            }
            let per_task = recipe.per_task_lambda.as_deref().unwrap_or_default();
            if per_task.len() != n {
                return Err(Error::InvalidRecipe(format!(
                    "{} per-task lambdas for {n} task vectors",
                    per_task.len()
                )));
            }
            consensus_kernel(out.values_mut(), &d, lambda, per_task);
        }
        LsDataless => {
            let masks = topk_masks(out.shape(), &d, recipe.sparsity.unwrap_or(1.0))?;
            stitch_kernel(out.values_mut(), &d, &masks);
        }
        LsTrained => {
            let GroupStats::Masks(masks) = stats else {
                return Err(missing("mask", &key));
            };
            if masks.len() != n || masks.iter().any(|m| m.shape() != out.shape()) {
                return Err(Error::InvalidStats(format!("masks for {key} do not match the parameter")));
            }
            stitch_kernel(out.values_mut(), &d, &masks);
        }
    }
    out.round_to_dtype();
    Ok(out)
}

fn missing(kind: &str, key: &ParamKey) -> Error {
    Error::MissingStats {
        kind: kind.to_string(),
        key: key.to_string(),
        task: "*".to_string(),
    }
}
