//! Browser bindings for a small in-memory merge playground.
//!
//! The page builds a synthetic pretrained vector and a few task vectors,
//! then asks for merged results, consensus votes, and normalized scores.

use mergeforge::algorithms::{
    consensus_ta, consensus_votes, dare_merge, ls_dataless, task_arithmetic, ties_merge,
};
use mergeforge::metrics::{normalized_performance, ScoreTable};
use mergeforge::{MergeMethod, Tensor};
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Deterministic value in [-1, 1) for (seed, stream, index).
fn noise(seed: u64, stream: u64, j: u64) -> f32 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(j);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 40) as f32 / (1u64 << 23) as f32 - 1.0
}

/// A pretrained vector and `n` task vectors of equal length. Each task has a
/// contiguous block of large updates on top of small noise, and neighbouring
/// blocks overlap so that sign conflicts show up.
#[wasm_bindgen]
pub struct MergeDemo {
    pretrained: Tensor,
    deltas: Vec<Tensor>,
}

#[wasm_bindgen]
impl MergeDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(n_tasks: usize, len: usize, seed: u32) -> Result<MergeDemo, JsError> {
        if !(2..=8).contains(&n_tasks) || !(8..=4096).contains(&len) {
            return Err(JsError::new("need 2-8 tasks and 8-4096 elements"));
        }
        let seed = seed as u64;
        let pretrained = (0..len).map(|j| 0.5 * noise(seed, 0, j as u64)).collect();
        let pretrained = Tensor::from_f32(vec![len], pretrained).map_err(js_err)?;
        let block = len / n_tasks;
        let deltas = (0..n_tasks)
            .map(|i| {
                let start = i * block;
                let end = (start + block + block / 2).min(len);
                let values = (0..len)
                    .map(|j| {
                        let small = 0.05 * noise(seed, 1 + i as u64, j as u64);
                        if (start..end).contains(&j) {
                            small + 0.6 * noise(seed, 100 + i as u64, j as u64)
                        } else {
                            small
                        }
                    })
                    .collect();
                Tensor::from_f32(vec![len], values).map_err(js_err)
            })
            .collect::<Result<_, _>>()?;
        Ok(MergeDemo { pretrained, deltas })
    }

    pub fn tasks(&self) -> usize {
        self.deltas.len()
    }

    pub fn pretrained(&self) -> Vec<f32> {
        self.pretrained.values().to_vec()
    }

    pub fn task_vector(&self, task: usize) -> Result<Vec<f32>, JsError> {
        self.deltas
            .get(task)
            .map(|t| t.values().to_vec())
            .ok_or_else(|| JsError::new("no such task"))
    }

    /// Merged weights minus the pretrained weights.
    ///
    /// `param` is the sparsity for TIES and Localize-and-Stitch, the drop
    /// rate for DARE, and the shared per-task lambda for Consensus TA. It is
    /// ignored otherwise.
    pub fn merge(&self, method: &str, lambda: f64, param: f64, seed: u32) -> Result<Vec<f32>, JsError> {
        let method: MergeMethod = method.parse().map_err(js_err)?;
        let n = self.deltas.len();
        let pre = &self.pretrained;
        let merged = match method {
            MergeMethod::ModelSoup => task_arithmetic(pre, &self.deltas, 1.0 / n as f64),
            MergeMethod::TaskArithmetic => task_arithmetic(pre, &self.deltas, lambda),
            MergeMethod::Ties => ties_merge(pre, &self.deltas, param, lambda),
            MergeMethod::Dare => dare_merge("demo", pre, &self.deltas, param, lambda, seed as u64),
            MergeMethod::ConsensusTa => consensus_ta(pre, &self.deltas, lambda, &vec![param; n]),
            MergeMethod::LsDataless => ls_dataless(pre, &self.deltas, param),
            other => return Err(JsError::new(&format!("{other} needs statistics and is not in the demo"))),
        }
        .map_err(js_err)?;
        Ok(merged
            .values()
            .iter()
            .zip(pre.values())
            .map(|(m, p)| m - p)
            .collect())
    }

    /// Number of tasks voting for each position under Consensus TA.
    pub fn consensus_votes(&self, lambda: f64, per_task_lambda: f64) -> Result<Vec<u8>, JsError> {
        let per_task = vec![per_task_lambda; self.deltas.len()];
        consensus_votes(&self.deltas, lambda, &per_task).map_err(js_err)
    }
}

/// Mean of `merged / finetuned` over tasks, times 100.
#[wasm_bindgen(js_name = normalizedPerformance)]
pub fn normalized_performance_js(merged: Vec<f64>, finetuned: Vec<f64>) -> Result<f64, JsError> {
    if merged.len() != finetuned.len() {
        return Err(JsError::new("merged and finetuned scores differ in length"));
    }
    let name = |i: usize| format!("task{i:03}");
    let table = ScoreTable {
        merged: merged.iter().enumerate().map(|(i, v)| (name(i), *v)).collect(),
        finetuned: finetuned.iter().enumerate().map(|(i, v)| (name(i), *v)).collect(),
        ..Default::default()
    };
    normalized_performance(&table).map_err(js_err)
}
