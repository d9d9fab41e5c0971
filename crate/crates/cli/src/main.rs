use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mergeforge::metrics::{average_accuracy, forgetting_score, normalized_performance, RuntimeReport, ScoreTable};
use mergeforge::pipeline::{merge_checkpoints, MergeOptions};
use mergeforge::search::{build_plan, run_search, CommandHook, ScoreFileHook, SearchOptions, SearchOutcome};
use mergeforge::stats::{load_stats, StatsBundle, StatsKind};
use mergeforge::{open_checkpoint, validate_set, CheckpointSet, MergeMethod};
use serde::Serialize;

mod error;
mod recipe;

use error::CliError;
use recipe::{Hook, RecipeFile};

/// Search logs are written next to the candidates under this name.
const SEARCH_LOG_FILE_NAME: &str = "search_log.json";

#[derive(Parser)]
#[command(name = "mergeforge", version, about = "Merge finetuned checkpoints of a shared base model")]
struct Cli {
    /// Worker threads for tensor kernels. MERGEFORGE_THREADS takes precedence.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Merge once with the hyperparameters in the recipe.
    Merge {
        recipe: PathBuf,
        /// Overrides [output].path.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the hyperparameter grid and keep the best candidate.
    Search {
        recipe: PathBuf,
        /// Keep every candidate checkpoint.
        #[arg(long)]
        keep_all: bool,
    },
    /// Aggregate score tables.
    Report {
        #[arg(required = true)]
        tables: Vec<PathBuf>,
        /// Also report the forgetting score; needs `base` and
        /// `generalization` blocks.
        #[arg(long)]
        forgetting: bool,
        /// Search log whose runtime split is printed after the scores.
        #[arg(long)]
        runtime: Option<PathBuf>,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Check a recipe, its checkpoints and its statistics without merging.
    Validate { recipe: PathBuf },
}

fn configure_threads(flag: Option<usize>) -> Result<(), CliError> {
    let from_env = match std::env::var("MERGEFORGE_THREADS") {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("MERGEFORGE_THREADS must be a positive integer, got {v:?}")))?,
        ),
        Err(_) => None,
    };
    let Some(threads) = from_env.or(flag) else {
        return Ok(());
    };
    if threads == 0 {
        return Err(CliError::Usage("thread count must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn open_set(recipe: &RecipeFile) -> Result<CheckpointSet, CliError> {
    let pretrained = open_checkpoint(&recipe.models.pretrained)?;
    let mut finetuned = Vec::with_capacity(recipe.models.finetuned.len());
    for entry in &recipe.models.finetuned {
        let mut m = open_checkpoint(entry.path())?;
        m.set_name(entry.name());
        finetuned.push(m);
    }
    Ok(validate_set(pretrained, finetuned)?)
}

fn open_stats(recipe: &RecipeFile, method: MergeMethod, set: &CheckpointSet) -> Result<Option<StatsBundle>, CliError> {
    match (StatsKind::for_method(method), &recipe.stats) {
        (Some(kind), Some(s)) => Ok(Some(load_stats(&s.path, kind, set)?)),
        (Some(kind), None) => Err(CliError::Recipe(format!(
            "{method} needs a [stats] section pointing at a {kind} bundle"
        ))),
        (None, Some(_)) => Err(CliError::Recipe(format!("{method} does not use a [stats] section"))),
        (None, None) => Ok(None),
    }
}

fn merge_options(recipe: &RecipeFile) -> MergeOptions {
    MergeOptions {
        shard_bytes_limit: recipe.output.shard_bytes_limit,
        ..MergeOptions::default()
    }
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn cmd_merge(path: &Path, output: Option<PathBuf>) -> Result<(), CliError> {
    let file = RecipeFile::load(path)?;
    let recipe = file.merge_recipe()?;
    let set = open_set(&file)?;
    let stats = open_stats(&file, recipe.method, &set)?;
    let out_dir = output.unwrap_or_else(|| file.output.path.clone());
    let result = merge_checkpoints(&set, &recipe, stats.as_ref(), &out_dir, &merge_options(&file))?;
    print_json(&result.metadata.output);
    Ok(())
}

#[derive(Serialize)]
struct SearchLog<'a> {
    method: MergeMethod,
    tasks: Vec<String>,
    runs: usize,
    #[serde(flatten)]
    outcome: &'a SearchOutcome,
}

fn cmd_search(path: &Path, keep_all: bool) -> Result<(), CliError> {
    let file = RecipeFile::load(path)?;
    let method = file.method()?;
    let section = file.search_section()?;
    let hook = file.hook()?;
    let set = open_set(&file)?;
    let stats = open_stats(&file, method, &set)?;
    let plan = build_plan(method, &section.overrides, set.n())?;
    let options = SearchOptions {
        merge: merge_options(&file),
        keep_all: keep_all || section.keep_all,
    };
    let work_dir = &file.output.path;
    let outcome = match hook {
        Hook::Command(template) => {
            run_search(&plan, &set, stats.as_ref(), &mut CommandHook { template }, work_dir, &options)?
        }
        Hook::ScoreFiles(pattern) => {
            run_search(&plan, &set, stats.as_ref(), &mut ScoreFileHook { pattern }, work_dir, &options)?
        }
    };
    let log = SearchLog {
        method,
        tasks: set.task_names(),
        runs: plan.run_count(),
        outcome: &outcome,
    };
    let log_path = work_dir.join(SEARCH_LOG_FILE_NAME);
    let text = serde_json::to_string_pretty(&log).expect("serializable");
    std::fs::write(&log_path, text).map_err(|e| CliError::Io(log_path.clone(), e))?;

    println!("best: {}", outcome.best_checkpoint.display());
    println!("recipe: {}", serde_json::to_string(&outcome.best_recipe).expect("serializable"));
    if let Some(i) = outcome.best_index {
        let score = outcome.candidates[i].score.unwrap_or(f64::NAN);
        println!("score: {score:.1} (candidate {i} of {})", outcome.candidates.len());
    }
    println!("log: {}", log_path.display());
    print!("{}", outcome.runtime.render());
    Ok(())
}

#[derive(Serialize)]
struct TableReport {
    table: PathBuf,
    avg_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    avg_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    forgetting: Option<f64>,
}

fn report_table(path: &Path, forgetting: bool) -> Result<TableReport, CliError> {
    let table = ScoreTable::from_path(path)?;
    let avg_norm = if table.finetuned.is_empty() {
        None
    } else {
        Some(normalized_performance(&table)?)
    };
    let forgetting = if forgetting {
        if table.base.is_empty() {
            return Err(CliError::Usage(format!(
                "{}: --forgetting needs a `base` block with the pretrained model's scores",
                path.display()
            )));
        }
        Some(forgetting_score(&table)?)
    } else {
        None
    };
    Ok(TableReport {
        table: path.to_path_buf(),
        avg_acc: average_accuracy(&table)?,
        avg_norm,
        forgetting,
    })
}

fn read_runtime(path: &Path) -> Result<RuntimeReport, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_value(value["runtime"].clone())
        .map_err(|e| CliError::Usage(format!("{}: no runtime block: {e}", path.display())))
}

fn cmd_report(tables: &[PathBuf], forgetting: bool, runtime: Option<PathBuf>, json: bool) -> Result<(), CliError> {
    let reports = tables
        .iter()
        .map(|p| report_table(p, forgetting))
        .collect::<Result<Vec<_>, _>>()?;
    let runtime = runtime.as_deref().map(read_runtime).transpose()?;
    if json {
        print_json(&serde_json::json!({ "tables": reports, "runtime": runtime }));
        return Ok(());
    }
    for r in &reports {
        println!("{}", r.table.display());
        println!("  Avg. Acc    {:.1}", r.avg_acc);
        if let Some(v) = r.avg_norm {
            println!("  Avg. Norm   {v:.1}");
        }
        if let Some(v) = r.forgetting {
            println!("  Forgetting  {v:.1}");
        }
    }
    if let Some(rt) = runtime {
        print!("{}", rt.render());
    }
    Ok(())
}

fn cmd_validate(path: &Path) -> Result<(), CliError> {
    let file = RecipeFile::load(path)?;
    let method = file.method()?;
    let runs = if file.search.is_some() {
        let section = file.search_section()?;
        file.hook()?;
        Some(section)
    } else {
        file.merge_recipe()?;
        None
    };
    let set = open_set(&file)?;
    for m in std::iter::once(set.pretrained()).chain(set.finetuned()) {
        m.shard_lengths_ok()?;
    }
    let stats = open_stats(&file, method, &set)?;
    let runs = runs
        .map(|s| build_plan(method, &s.overrides, set.n()).map(|p| p.run_count()))
        .transpose()?;
    print_json(&serde_json::json!({
        "method": method,
        "tasks": set.task_names(),
        "tensors": set.pretrained().len(),
        "parameters": set.pretrained().total_params(),
        "stats": stats.as_ref().map(|s| s.kind().as_str()),
        "search_runs": runs,
    }));
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Merge { recipe, output } => cmd_merge(&recipe, output),
        Command::Search { recipe, keep_all } => cmd_search(&recipe, keep_all),
        Command::Report {
            tables,
            forgetting,
            runtime,
            json,
        } => cmd_report(&tables, forgetting, runtime, json),
        Command::Validate { recipe } => cmd_validate(&recipe),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
