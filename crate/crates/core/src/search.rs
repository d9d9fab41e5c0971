//! Grid search over merge hyperparameters.
//!
//! Default grids:
//!
//! | method            | grid                                         | runs      |
//! |-------------------|----------------------------------------------|-----------|
//! | `task_arithmetic` | lambda in 0.1..=1.0                          | 10        |
//! | `regmean`         | alpha in {0.1, 0.3, 0.5, 0.7, 0.9}           | 5         |
//! | `ties`            | sparsity in {0.1, 0.2, 0.3} x lambda         | 30        |
//! | `dare`            | drop_rate in {0.1, 0.2, 0.3} x lambda        | 30        |
//! | `consensus_ta`    | per-task lambda_i in 0.2..=0.6, one task at a time, then lambda | 5n + 10 |
//! | `ls_dataless`     | sparsity in 0.1..=0.5                        | 5         |
//! | others            | none                                         | 0         |
//!
//! During the sequential consensus schedule, tasks not yet tuned hold
//! `lambda_i = 0.4` and the shared lambda is held at 0.5; both are
//! configurable through [`SearchOverrides`].

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::algorithms::{MergeMethod, MergeRecipe};
use crate::checkpoint::CheckpointSet;
use crate::error::{Error, Result};
use crate::metrics::{normalized_performance, runtime_report, RuntimeReport, ScoreTable, Timing};
use crate::pipeline::{merge_checkpoints, MergeOptions};
use crate::stats::StatsBundle;

fn tenths(from: u32, to: u32) -> Vec<f64> {
    (from..=to).map(|i| i as f64 / 10.0).collect()
}

pub fn default_lambda_grid() -> Vec<f64> {
    tenths(1, 10)
}

/// Optional replacements for the default grids and schedule constants.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_rate: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_task_lambda: Option<Vec<f64>>,
    /// Value held by consensus tasks that are not tuned yet.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hold: Option<f64>,
    /// Shared lambda used while the per-task values are tuned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tuning_lambda: Option<f64>,
    /// DARE seed for every candidate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// Every recipe in the grid is evaluated independently.
    Joint,
    /// Consensus TA: tune each task's lambda_i in turn, then the shared lambda.
    SequentialConsensus {
        n_tasks: usize,
        per_task_grid: Vec<f64>,
        lambda_grid: Vec<f64>,
        hold: f64,
        tuning_lambda: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchPlan {
    pub method: MergeMethod,
    pub schedule: Schedule,
    /// Candidate recipes for a joint schedule; empty for the sequential one,
    /// whose later candidates depend on earlier results.
    pub grid: Vec<MergeRecipe>,
}

impl SearchPlan {
    /// Number of merges the search performs (0 when nothing is tuned).
    pub fn run_count(&self) -> usize {
        match &self.schedule {
            Schedule::Joint => self.grid.len(),
            Schedule::SequentialConsensus {
                n_tasks,
                per_task_grid,
                lambda_grid,
                ..
            } => n_tasks * per_task_grid.len() + lambda_grid.len(),
        }
    }
}

fn non_empty(name: &str, v: Vec<f64>) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::InvalidRecipe(format!("search grid `{name}` is empty")));
    }
    Ok(v)
}

/// Builds the search plan for `method`, starting from the default grids.
/// `n_tasks` sizes the consensus schedule.
pub fn build_plan(method: MergeMethod, overrides: &SearchOverrides, n_tasks: usize) -> Result<SearchPlan> {
    use MergeMethod::*;
    let o = overrides;
    let lambdas = || non_empty("lambda", o.lambda.clone().unwrap_or_else(default_lambda_grid));
    let seed = o.seed.unwrap_or(0);
    let cross = |outer: Vec<f64>, make: &dyn Fn(f64, f64) -> MergeRecipe| -> Result<Vec<MergeRecipe>> {
        let ls = lambdas()?;
        Ok(outer.iter().flat_map(|&s| ls.iter().map(move |&l| make(s, l))).collect())
    };

    let (schedule, grid) = match method {
        ModelSoup | Fisher | LsTrained => (Schedule::Joint, Vec::new()),
        TaskArithmetic => (
            Schedule::Joint,
            lambdas()?.into_iter().map(MergeRecipe::task_arithmetic).collect(),
        ),
        RegMean => {
            let alphas = o.alpha.clone().unwrap_or_else(|| vec![0.1, 0.3, 0.5, 0.7, 0.9]);
            (
                Schedule::Joint,
                non_empty("alpha", alphas)?.into_iter().map(MergeRecipe::regmean).collect(),
            )
        }
        Ties => {
            let s = non_empty("sparsity", o.sparsity.clone().unwrap_or_else(|| tenths(1, 3)))?;
            (Schedule::Joint, cross(s, &MergeRecipe::ties)?)
        }
        Dare => {
            let p = non_empty("drop_rate", o.drop_rate.clone().unwrap_or_else(|| tenths(1, 3)))?;
            (Schedule::Joint, cross(p, &|p, l| MergeRecipe::dare(p, l, seed))?)
        }
        LsDataless => {
            let s = non_empty("sparsity", o.sparsity.clone().unwrap_or_else(|| tenths(1, 5)))?;
            (Schedule::Joint, s.into_iter().map(MergeRecipe::ls_dataless).collect())
        }
        ConsensusTa => {
            if n_tasks < 2 {
                return Err(Error::ConsensusRequiresTwoTasks(n_tasks));
            }
            let per_task_grid = non_empty(
                "per_task_lambda",
                o.per_task_lambda.clone().unwrap_or_else(|| tenths(2, 6)),
            )?;
            (
                Schedule::SequentialConsensus {
                    n_tasks,
                    per_task_grid,
                    lambda_grid: lambdas()?,
                    hold: o.hold.unwrap_or(0.4),
                    tuning_lambda: o.tuning_lambda.unwrap_or(0.5),
                },
                Vec::new(),
            )
        }
    };
    for r in &grid {
        r.validate(Some(n_tasks))?;
    }
    Ok(SearchPlan { method, schedule, grid })
}

/// Scores a merged candidate checkpoint.
pub trait EvalHook {
    /// Returns the candidate's score table, or a reason it failed.
    fn evaluate(&mut self, index: usize, checkpoint: &Path, recipe: &MergeRecipe) -> std::result::Result<ScoreTable, String>;
}

impl<F> EvalHook for F
where
    F: FnMut(usize, &Path, &MergeRecipe) -> std::result::Result<ScoreTable, String>,
{
    fn evaluate(&mut self, index: usize, checkpoint: &Path, recipe: &MergeRecipe) -> std::result::Result<ScoreTable, String> {
        self(index, checkpoint, recipe)
    }
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', "'\\''"))
}

fn expand(template: &str, index: usize, checkpoint: &Path, quote: bool) -> String {
    let path = checkpoint.display().to_string();
    let path = if quote { shell_quote(&path) } else { path };
    template
        .replace("{checkpoint}", &path)
        .replace("{index}", &index.to_string())
}

/// Runs a shell command per candidate. `{checkpoint}` and `{index}` in the
/// template are substituted; the command must exit 0 and print a score table
/// as JSON on stdout.
#[derive(Debug, Clone)]
pub struct CommandHook {
    pub template: String,
}

impl EvalHook for CommandHook {
    fn evaluate(&mut self, index: usize, checkpoint: &Path, _: &MergeRecipe) -> std::result::Result<ScoreTable, String> {
        let cmd = expand(&self.template, index, checkpoint, true);
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&cmd)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| format!("could not start `{cmd}`: {e}"))?;
        let mut stdout = String::new();
        child
            .stdout
            .take()
            .expect("stdout is piped")
            .read_to_string(&mut stdout)
            .map_err(|e| format!("reading hook output: {e}"))?;
        let status = child.wait().map_err(|e| e.to_string())?;
        if !status.success() {
            return Err(format!("`{cmd}` exited with {status}"));
        }
        ScoreTable::from_json(&stdout).map_err(|e| e.to_string())
    }
}

/// Reads a precomputed score file per candidate; `{index}` and
/// `{checkpoint}` in the pattern are substituted.
#[derive(Debug, Clone)]
pub struct ScoreFileHook {
    pub pattern: String,
}

impl EvalHook for ScoreFileHook {
    fn evaluate(&mut self, index: usize, checkpoint: &Path, _: &MergeRecipe) -> std::result::Result<ScoreTable, String> {
        let path = PathBuf::from(expand(&self.pattern, index, checkpoint, false));
        ScoreTable::from_path(&path).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CandidateRecord {
    pub index: usize,
    pub stage: String,
    pub recipe: MergeRecipe,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub merge_secs: f64,
    pub eval_secs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SearchOutcome {
    pub best_index: Option<usize>,
    pub best_recipe: MergeRecipe,
    pub best_checkpoint: PathBuf,
    pub candidates: Vec<CandidateRecord>,
    pub runtime: RuntimeReport,
}

#[derive(Debug, Clone, Default)]
pub struct SearchOptions {
    pub merge: MergeOptions,
    /// Keep every candidate checkpoint instead of only the best so far.
    pub keep_all: bool,
}

/// Name of the directory holding the selected checkpoint inside the work
/// directory.
pub const BEST_DIR_NAME: &str = "best";

struct Runner<'a, H: EvalHook> {
    set: &'a CheckpointSet,
    stats: Option<&'a StatsBundle>,
    hook: &'a mut H,
    work_dir: &'a Path,
    options: &'a SearchOptions,
    records: Vec<CandidateRecord>,
}

fn remove_dir(p: &Path) -> Result<()> {
    if p.exists() {
        fs::remove_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

impl<H: EvalHook> Runner<'_, H> {
    fn candidate_dir(&self, index: usize) -> PathBuf {
        self.work_dir.join(format!("candidate-{index:04}"))
    }

    /// Merges and scores one candidate. Returns its score when evaluation
    /// succeeded.
    fn run(&mut self, stage: &str, recipe: MergeRecipe) -> Result<Option<f64>> {
        let index = self.records.len();
        let dir = self.candidate_dir(index);
        let t0 = Instant::now();
        merge_checkpoints(self.set, &recipe, self.stats, &dir, &self.options.merge)?;
        let merge_secs = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let result = self
            .hook
            .evaluate(index, &dir, &recipe)
            .and_then(|table| normalized_performance(&table).map_err(|e| e.to_string()));
        let eval_secs = t1.elapsed().as_secs_f64();
        let (score, error) = match result {
            Ok(s) => (Some(s), None),
            Err(e) => (None, Some(e)),
        };
        self.records.push(CandidateRecord {
            index,
            stage: stage.to_string(),
            recipe,
            score,
            error,
            merge_secs,
            eval_secs,
        });
        Ok(score)
    }

    /// Runs `recipes` as one stage and returns the index (into `recipes`) of
    /// the best. Ties keep the earlier candidate.
    fn stage(&mut self, name: &str, recipes: Vec<MergeRecipe>, best: &mut Option<(usize, f64)>) -> Result<usize> {
        let mut stage_best: Option<(usize, f64)> = None;
        for (pos, recipe) in recipes.into_iter().enumerate() {
            let global = self.records.len();
            let score = self.run(name, recipe)?;
            if let Some(s) = score {
                if stage_best.map_or(true, |(_, b)| s > b) {
                    stage_best = Some((pos, s));
                }
                if best.map_or(true, |(_, b)| s > b) {
                    if let Some((old, _)) = *best {
                        if !self.options.keep_all {
                            remove_dir(&self.candidate_dir(old))?;
                        }
                    }
                    *best = Some((global, s));
                    continue;
                }
            }
            if !self.options.keep_all {
                remove_dir(&self.candidate_dir(global))?;
            }
        }
        stage_best
            .map(|(pos, _)| pos)
            .ok_or(Error::AllCandidatesFailed(self.records.len()))
    }
}

/// Runs a search plan, keeping the candidate with the highest normalized
/// performance. The selected checkpoint ends up in `work_dir/best`.
///
/// Methods without a grid are merged once with their bare recipe and not
/// evaluated.
pub fn run_search<H: EvalHook>(
    plan: &SearchPlan,
    set: &CheckpointSet,
    stats: Option<&StatsBundle>,
    hook: &mut H,
    work_dir: &Path,
    options: &SearchOptions,
) -> Result<SearchOutcome> {
    fs::create_dir_all(work_dir).map_err(|e| Error::io(work_dir, e))?;
    let best_dir = work_dir.join(BEST_DIR_NAME);
    remove_dir(&best_dir)?;

    if plan.run_count() == 0 {
        let recipe = MergeRecipe::bare(plan.method);
        let t0 = Instant::now();
        merge_checkpoints(set, &recipe, stats, &best_dir, &options.merge)?;
        let timing = Timing {
            label: recipe.method.to_string(),
            merge_secs: t0.elapsed().as_secs_f64(),
            eval_secs: None,
        };
        return Ok(SearchOutcome {
            best_index: None,
            best_recipe: recipe,
            best_checkpoint: best_dir,
            candidates: Vec::new(),
            runtime: runtime_report(plan.method.as_str(), &[timing], None),
        });
    }

    let mut runner = Runner {
        set,
        stats,
        hook,
        work_dir,
        options,
        records: Vec::new(),
    };
    let mut best: Option<(usize, f64)> = None;
    match &plan.schedule {
        Schedule::Joint => {
            runner.stage("grid", plan.grid.clone(), &mut best)?;
        }
        Schedule::SequentialConsensus {
            n_tasks,
            per_task_grid,
            lambda_grid,
            hold,
            tuning_lambda,
        } => {
            let mut tuned = vec![*hold; *n_tasks];
            for task in 0..*n_tasks {
                let recipes = per_task_grid
                    .iter()
                    .map(|&v| {
                        let mut per_task = tuned.clone();
                        per_task[task] = v;
                        MergeRecipe::consensus_ta(*tuning_lambda, per_task)
                    })
                    .collect();
                let mut stage_best = None;
                let pick = runner.stage(&format!("per_task_lambda[{task}]"), recipes, &mut stage_best)?;
                tuned[task] = per_task_grid[pick];
                // Intermediate stages only fix lambda_i; their checkpoints are
                // not final candidates.
                if let Some((i, _)) = stage_best {
                    if !options.keep_all {
                        remove_dir(&runner.candidate_dir(i))?;
                    }
                }
            }
            let recipes = lambda_grid
                .iter()
                .map(|&l| MergeRecipe::consensus_ta(l, tuned.clone()))
                .collect();
            runner.stage("lambda", recipes, &mut best)?;
        }
    }

    let (best_index, _) = best.ok_or(Error::AllCandidatesFailed(runner.records.len()))?;
    let winner = runner.candidate_dir(best_index);
    if options.keep_all {
        copy_dir(&winner, &best_dir)?;
    } else {
        fs::rename(&winner, &best_dir).map_err(|e| Error::io(&best_dir, e))?;
    }
    let records = runner.records;
    let timings: Vec<Timing> = records
        .iter()
        .map(|r| Timing {
            label: format!("{}#{}", r.stage, r.index),
            merge_secs: r.merge_secs,
            eval_secs: Some(r.eval_secs),
        })
        .collect();
    Ok(SearchOutcome {
        best_index: Some(best_index),
        best_recipe: records[best_index].recipe.clone(),
        best_checkpoint: best_dir,
        runtime: runtime_report(plan.method.as_str(), &timings, Some(best_index)),
        candidates: records,
    })
}

fn copy_dir(from: &Path, to: &Path) -> Result<()> {
    fs::create_dir_all(to).map_err(|e| Error::io(to, e))?;
    for item in fs::read_dir(from).map_err(|e| Error::io(from, e))?.flatten() {
        let dest = to.join(item.file_name());
        fs::copy(item.path(), &dest).map_err(|e| Error::io(&dest, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{open_checkpoint, validate_set, write_checkpoint, ParamKey};
    use crate::tensor::Tensor;

    fn count(method: MergeMethod, n: usize) -> usize {
        build_plan(method, &SearchOverrides::default(), n).unwrap().run_count()
    }

    #[test]
    fn default_grid_sizes() {
        use MergeMethod::*;
        assert_eq!(count(TaskArithmetic, 5), 10);
        assert_eq!(count(RegMean, 5), 5);
        assert_eq!(count(Ties, 5), 30);
        assert_eq!(count(Dare, 5), 30);
        assert_eq!(count(ConsensusTa, 5), 35);
        assert_eq!(count(LsDataless, 5), 5);
        assert_eq!(count(ModelSoup, 5), 0);
        assert_eq!(count(Fisher, 5), 0);
        assert_eq!(count(LsTrained, 5), 0);
    }

    #[test]
    fn grid_values() {
        let plan = build_plan(MergeMethod::TaskArithmetic, &SearchOverrides::default(), 2).unwrap();
        let lambdas: Vec<f64> = plan.grid.iter().map(|r| r.lambda.unwrap()).collect();
        assert_eq!(lambdas, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]);

        let plan = build_plan(MergeMethod::Ties, &SearchOverrides::default(), 2).unwrap();
        assert_eq!(plan.grid[0], MergeRecipe::ties(0.1, 0.1));
        assert_eq!(plan.grid[29], MergeRecipe::ties(0.3, 1.0));

        let overrides = SearchOverrides {
            lambda: Some(vec![0.5]),
            seed: Some(7),
            ..Default::default()
        };
        let plan = build_plan(MergeMethod::Dare, &overrides, 2).unwrap();
        assert_eq!(plan.grid, vec![
            MergeRecipe::dare(0.1, 0.5, 7),
            MergeRecipe::dare(0.2, 0.5, 7),
            MergeRecipe::dare(0.3, 0.5, 7),
        ]);
    }

    #[test]
    fn plan_errors() {
        assert!(matches!(
            build_plan(MergeMethod::ConsensusTa, &SearchOverrides::default(), 1),
            Err(Error::ConsensusRequiresTwoTasks(1))
        ));
        let empty = SearchOverrides {
            lambda: Some(vec![]),
            ..Default::default()
        };
        assert!(build_plan(MergeMethod::TaskArithmetic, &empty, 2).is_err());
        let bad = SearchOverrides {
            lambda: Some(vec![-1.0]),
            ..Default::default()
        };
        assert!(build_plan(MergeMethod::TaskArithmetic, &bad, 2).is_err());
    }

    fn tiny_set(root: &Path, n: usize) -> CheckpointSet {
        let write = |name: String, v: f32| {
            let p = root.join(&name);
            write_checkpoint(vec![(ParamKey::from("w"), Tensor::vector(&[v, -v]))], &p, u64::MAX).unwrap();
            let mut m = open_checkpoint(&p).unwrap();
            m.set_name(name);
            m
        };
        let pre = write("pre".into(), 0.0);
        let ft = (0..n).map(|i| write(format!("t{i}"), i as f32 + 1.0)).collect();
        validate_set(pre, ft).unwrap()
    }

    fn table(score: f64) -> ScoreTable {
        ScoreTable {
            merged: [("a".to_string(), score)].into(),
            finetuned: [("a".to_string(), 1.0)].into(),
            ..Default::default()
        }
    }

    #[test]
    fn identical_scores_pick_the_first_candidate() {
        let dir = tempfile::tempdir().unwrap();
        let set = tiny_set(dir.path(), 2);
        let plan = build_plan(MergeMethod::TaskArithmetic, &SearchOverrides::default(), 2).unwrap();
        let mut calls = 0;
        let mut hook = |_: usize, _: &Path, _: &MergeRecipe| {
            calls += 1;
            Ok(table(0.5))
        };
        let out = run_search(&plan, &set, None, &mut hook, &dir.path().join("w"), &SearchOptions::default()).unwrap();
        assert_eq!(calls, 10);
        assert_eq!(out.best_index, Some(0));
        assert_eq!(out.best_recipe.lambda, Some(0.1));
        assert!(out.best_checkpoint.join("model.safetensors").exists());
        // Only the best checkpoint is kept.
        let left: Vec<_> = fs::read_dir(dir.path().join("w")).unwrap().collect();
        assert_eq!(left.len(), 1);
        assert_eq!(out.runtime.validation_runs, 10);
    }

    #[test]
    fn monotone_hook_selects_largest_lambda() {
        let dir = tempfile::tempdir().unwrap();
        let set = tiny_set(dir.path(), 2);
        let plan = build_plan(MergeMethod::TaskArithmetic, &SearchOverrides::default(), 2).unwrap();
        let mut hook = |_: usize, _: &Path, r: &MergeRecipe| Ok(table(r.lambda.unwrap()));
        let out = run_search(&plan, &set, None, &mut hook, &dir.path().join("w"), &SearchOptions::default()).unwrap();
        assert_eq!(out.best_recipe.lambda, Some(1.0));
    }

    #[test]
    fn failing_candidates_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let set = tiny_set(dir.path(), 2);
        let plan = build_plan(MergeMethod::TaskArithmetic, &SearchOverrides::default(), 2).unwrap();
        let mut hook = |i: usize, _: &Path, r: &MergeRecipe| {
            if i == 9 {
                Err("crashed".to_string())
            } else {
                Ok(table(r.lambda.unwrap()))
            }
        };
        let out = run_search(&plan, &set, None, &mut hook, &dir.path().join("w"), &SearchOptions::default()).unwrap();
        assert_eq!(out.best_recipe.lambda, Some(0.9));
        assert_eq!(out.candidates[9].error.as_deref(), Some("crashed"));

        let mut all_fail = |_: usize, _: &Path, _: &MergeRecipe| Err::<ScoreTable, _>("no".to_string());
        let err = run_search(&plan, &set, None, &mut all_fail, &dir.path().join("w2"), &SearchOptions::default());
        assert!(matches!(err, Err(Error::AllCandidatesFailed(10))));
    }

    #[test]
    fn consensus_schedule_is_sequential() {
        let dir = tempfile::tempdir().unwrap();
        let set = tiny_set(dir.path(), 3);
        let plan = build_plan(MergeMethod::ConsensusTa, &SearchOverrides::default(), 3).unwrap();
        assert_eq!(plan.run_count(), 25);
        // Reward lambda_i close to 0.2 + 0.1 * i and lambda close to 0.7.
        let mut hook = |_: usize, _: &Path, r: &MergeRecipe| {
            let lt = r.per_task_lambda.as_ref().unwrap();
            let miss: f64 = lt.iter().enumerate().map(|(i, v)| (v - (0.2 + 0.1 * i as f64)).abs()).sum::<f64>()
                + (r.lambda.unwrap() - 0.7).abs();
            Ok(table(10.0 - miss))
        };
        let out = run_search(&plan, &set, None, &mut hook, &dir.path().join("w"), &SearchOptions::default()).unwrap();
        assert_eq!(out.candidates.len(), 25);
        let best = out.best_recipe;
        assert_eq!(best.lambda, Some(0.7));
        let lt = best.per_task_lambda.unwrap();
        assert!((lt[0] - 0.2).abs() < 1e-12 && (lt[1] - 0.3).abs() < 1e-12 && (lt[2] - 0.4).abs() < 1e-12);
        // The first stage holds untuned tasks at 0.4 and lambda at 0.5.
        let first = &out.candidates[0].recipe;
        assert_eq!(first.per_task_lambda.as_deref(), Some(&[0.2, 0.4, 0.4][..]));
        assert_eq!(first.lambda, Some(0.5));
    }

    #[test]
    fn no_grid_means_single_merge() {
        let dir = tempfile::tempdir().unwrap();
        let set = tiny_set(dir.path(), 2);
        let plan = build_plan(MergeMethod::ModelSoup, &SearchOverrides::default(), 2).unwrap();
        let mut hook = |_: usize, _: &Path, _: &MergeRecipe| -> std::result::Result<ScoreTable, String> {
            panic!("not evaluated")
        };
        let out = run_search(&plan, &set, None, &mut hook, &dir.path().join("w"), &SearchOptions::default()).unwrap();
        assert_eq!(out.best_index, None);
        assert_eq!(out.runtime.validation_secs, 0.0);
        assert!(out.best_checkpoint.join("model.safetensors").exists());
    }

    #[test]
    fn command_and_file_hooks() {
        let dir = tempfile::tempdir().unwrap();
        let json = r#"{"merged":{"a":0.5},"finetuned":{"a":1.0}}"#;
        let mut cmd = CommandHook {
            template: format!("test -d {{checkpoint}} && echo '{json}'"),
        };
        let t = cmd.evaluate(0, dir.path(), &MergeRecipe::model_soup()).unwrap();
        assert_eq!(t.merged["a"], 0.5);
        let mut failing = CommandHook { template: "exit 3".into() };
        assert!(failing.evaluate(0, dir.path(), &MergeRecipe::model_soup()).is_err());

        fs::write(dir.path().join("scores-4.json"), json).unwrap();
        let mut file = ScoreFileHook {
            pattern: dir.path().join("scores-{index}.json").display().to_string(),
        };
        assert!(file.evaluate(4, dir.path(), &MergeRecipe::model_soup()).is_ok());
        assert!(file.evaluate(5, dir.path(), &MergeRecipe::model_soup()).is_err());
    }
}
