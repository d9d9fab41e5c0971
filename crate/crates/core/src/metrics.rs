//! Aggregate scores over externally evaluated tasks.
//!
//! Score tables are JSON:
//!
//! ```json
//! {"tasks": ["a", "b"],
//!  "merged": {"a": 0.5, "b": 0.3},
//!  "finetuned": {"a": 1.0, "b": 0.6},
//!  "base": {"held_out": 0.8},
//!  "generalization": {"held_out": 0.4}}
//! ```
//!
//! `generalization` holds the merged model's scores on held-out tasks and
//! `base` the pretrained model's scores on the same tasks.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreTable {
    /// Tasks to aggregate over; defaults to the keys of `merged`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tasks: Vec<String>,
    pub merged: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub finetuned: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub base: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub generalization: BTreeMap<String, f64>,
}

impl ScoreTable {
    pub fn from_json(text: &str) -> Result<Self> {
        let table: ScoreTable =
            serde_json::from_str(text).map_err(|e| Error::InvalidScoreTable(e.to_string()))?;
        table.check()?;
        Ok(table)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::InvalidScoreTable(msg) => Error::InvalidScoreTable(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The task list, falling back to the merged scores' keys.
    pub fn task_list(&self) -> Vec<&str> {
        if self.tasks.is_empty() {
            self.merged.keys().map(String::as_str).collect()
        } else {
            self.tasks.iter().map(String::as_str).collect()
        }
    }

    /// Structural checks: every listed task has a merged score, finetuned
    /// scores (when given) cover every task, and all scores are finite.
    pub fn check(&self) -> Result<()> {
        let all = self
            .merged
            .values()
            .chain(self.finetuned.values())
            .chain(self.base.values())
            .chain(self.generalization.values());
        if let Some(v) = all.into_iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidScoreTable(format!("non-finite score {v}")));
        }
        let tasks = self.task_list();
        if tasks.is_empty() {
            return Err(Error::InvalidScoreTable("no tasks".into()));
        }
        for t in &tasks {
            if !self.merged.contains_key(*t) {
                return Err(Error::InvalidScoreTable(format!("task {t} has no merged score")));
            }
            if !self.finetuned.is_empty() && !self.finetuned.contains_key(*t) {
                return Err(Error::InvalidScoreTable(format!("task {t} has no finetuned score")));
            }
        }
        Ok(())
    }
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len() as f64;
    values.sum::<f64>() / n
}

/// Mean over tasks of `merged / finetuned`, times 100.
pub fn normalized_performance(table: &ScoreTable) -> Result<f64> {
    table.check()?;
    let tasks = table.task_list();
    let mut ratios = Vec::with_capacity(tasks.len());
    for t in tasks {
        let ft = *table
            .finetuned
            .get(t)
            .ok_or_else(|| Error::InvalidScoreTable(format!("task {t} has no finetuned score")))?;
        if ft <= 0.0 {
            return Err(Error::ZeroFinetunedScore(t.to_string()));
        }
        ratios.push(table.merged[t] / ft);
    }
    Ok(mean(ratios.into_iter()) * 100.0)
}

/// Mean over generalization tasks of `merged / base`, times 100.
pub fn forgetting_score(table: &ScoreTable) -> Result<f64> {
    if table.generalization.is_empty() {
        return Err(Error::EmptyGeneralization);
    }
    let mut ratios = Vec::with_capacity(table.generalization.len());
    for (t, &merged) in &table.generalization {
        let base = *table
            .base
            .get(t)
            .ok_or_else(|| Error::MissingBaseScore(t.clone()))?;
        if base <= 0.0 {
            return Err(Error::InvalidScoreTable(format!("base score for {t} must be > 0")));
        }
        ratios.push(merged / base);
    }
    Ok(mean(ratios.into_iter()) * 100.0)
}

/// Plain mean of the merged scores.
pub fn average_accuracy(table: &ScoreTable) -> Result<f64> {
    table.check()?;
    let tasks = table.task_list();
    Ok(mean(tasks.iter().map(|t| table.merged[*t]).collect::<Vec<_>>().into_iter()))
}

/// Wall-clock for one merge and, during a search, its evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub label: String,
    pub merge_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_secs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeReport {
    pub method: String,
    /// Merge time of the selected (or only) configuration.
    pub algorithm_secs: f64,
    /// Sum of evaluation time over every evaluated configuration.
    pub validation_secs: f64,
    pub validation_runs: usize,
    pub entries: Vec<Timing>,
}

/// Splits timings into algorithm time and validation time. `selected`
/// indexes the configuration whose merge counts as the algorithm run; by
/// default the last entry.
pub fn runtime_report(method: &str, timings: &[Timing], selected: Option<usize>) -> RuntimeReport {
    let algorithm_secs = selected
        .and_then(|i| timings.get(i))
        .or(timings.last())
        .map_or(0.0, |t| t.merge_secs);
    let evals: Vec<f64> = timings.iter().filter_map(|t| t.eval_secs).collect();
    RuntimeReport {
        method: method.to_string(),
        algorithm_secs,
        validation_secs: evals.iter().sum(),
        validation_runs: evals.len(),
        entries: timings.to_vec(),
    }
}

impl RuntimeReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<20} {:>14} {:>15} {:>6}", "method", "algorithm (s)", "validation (s)", "runs");
        let _ = writeln!(
            out,
            "{:<20} {:>14.3} {:>15.3} {:>6}",
            self.method, self.algorithm_secs, self.validation_secs, self.validation_runs
        );
        out
    }
}
