//! TOML recipe files.
//!
//! ```toml
//! [models]
//! pretrained = "models/base"
//! finetuned = ["models/code", { name = "math", path = "models/math" }]
//!
//! [method]
//! name = "ties"
//! sparsity = 0.2
//! lambda = 0.5
//!
//! [stats]                # fisher, regmean and ls_trained only
//! path = "stats"
//!
//! [output]
//! path = "merged"
//! shard_bytes_limit = 5000000000
//!
//! [search]               # `mergeforge search` only
//! hook = "python eval.py {checkpoint}"
//! lambda = [0.2, 0.4]    # optional grid overrides
//! ```
//!
//! Relative paths are resolved against the recipe file's directory.

use std::path::{Path, PathBuf};

use mergeforge::search::SearchOverrides;
use mergeforge::{MergeMethod, MergeRecipe};
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeFile {
    pub models: ModelsSection,
    pub method: MethodSection,
    #[serde(default)]
    pub stats: Option<StatsSection>,
    pub output: OutputSection,
    #[serde(default)]
    pub search: Option<SearchSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsSection {
    pub pretrained: PathBuf,
    pub finetuned: Vec<ModelEntry>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ModelEntry {
    Path(PathBuf),
    Named { name: String, path: PathBuf },
}

impl ModelEntry {
    pub fn path(&self) -> &Path {
        match self {
            ModelEntry::Path(p) | ModelEntry::Named { path: p, .. } => p,
        }
    }

    /// Explicit name, or the file/directory name without a
    /// `.safetensors` suffix.
    pub fn name(&self) -> String {
        match self {
            ModelEntry::Named { name, .. } => name.clone(),
            ModelEntry::Path(p) => {
                let base = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                base.strip_suffix(".safetensors").map(str::to_string).unwrap_or(base)
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSection {
    pub name: String,
    pub lambda: Option<f64>,
    pub per_task_lambda: Option<Vec<f64>>,
    pub drop_rate: Option<f64>,
    pub sparsity: Option<f64>,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
}

impl MethodSection {
    fn has_hyperparameters(&self) -> bool {
        self.lambda.is_some()
            || self.per_task_lambda.is_some()
            || self.drop_rate.is_some()
            || self.sparsity.is_some()
            || self.alpha.is_some()
            || self.seed.is_some()
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsSection {
    pub path: PathBuf,
}

fn default_shard_limit() -> u64 {
    5_000_000_000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub path: PathBuf,
    #[serde(default = "default_shard_limit")]
    pub shard_bytes_limit: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    /// Shell command run per candidate; `{checkpoint}` is replaced with the
    /// candidate directory and `{index}` with its position.
    pub hook: Option<String>,
    /// Path pattern of precomputed score files, with `{index}`.
    pub score_files: Option<String>,
    #[serde(default)]
    pub keep_all: bool,
    #[serde(flatten)]
    pub overrides: SearchOverrides,
}

pub enum Hook {
    Command(String),
    ScoreFiles(String),
}

impl RecipeFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
        let mut recipe: RecipeFile =
            toml::from_str(&text).map_err(|e| CliError::Recipe(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        recipe.resolve_paths(base);
        Ok(recipe)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.models.pretrained);
        for m in &mut self.models.finetuned {
            match m {
                ModelEntry::Path(p) | ModelEntry::Named { path: p, .. } => fix(p),
            }
        }
        if let Some(s) = &mut self.stats {
            fix(&mut s.path);
        }
        fix(&mut self.output.path);
        if let Some(SearchSection { score_files: Some(pattern), .. }) = &mut self.search {
            let p = Path::new(pattern.as_str());
            if p.is_relative() {
                *pattern = base.join(p).display().to_string();
            }
        }
    }

    pub fn method(&self) -> Result<MergeMethod, CliError> {
        Ok(self.method.name.parse()?)
    }

    /// The single recipe a `merge` run executes.
    pub fn merge_recipe(&self) -> Result<MergeRecipe, CliError> {
        let m = &self.method;
        let recipe = MergeRecipe {
            method: self.method()?,
            lambda: m.lambda,
            per_task_lambda: m.per_task_lambda.clone(),
            drop_rate: m.drop_rate,
            sparsity: m.sparsity,
            alpha: m.alpha,
            stats_path: self.stats.as_ref().map(|s| s.path.clone()),
            seed: m.seed,
        };
        recipe.validate(Some(self.models.finetuned.len()))?;
        Ok(recipe)
    }

    pub fn search_section(&self) -> Result<&SearchSection, CliError> {
        let s = self
            .search
            .as_ref()
            .ok_or_else(|| CliError::Recipe("`search` needs a [search] section".into()))?;
        if self.method.has_hyperparameters() {
            return Err(CliError::Recipe(
                "[method] may only name the method when searching; grids go in [search]".into(),
            ));
        }
        Ok(s)
    }

    pub fn hook(&self) -> Result<Hook, CliError> {
        let s = self.search_section()?;
        match (&s.hook, &s.score_files) {
            (Some(cmd), None) => Ok(Hook::Command(cmd.clone())),
            (None, Some(pattern)) => Ok(Hook::ScoreFiles(pattern.clone())),
            _ => Err(CliError::Recipe(
                "[search] needs exactly one of `hook` or `score_files`".into(),
            )),
        }
    }
}
