//! End-to-end merge of a checkpoint set into an output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::algorithms::{merge_group, GroupStats, MergeMethod, MergeRecipe, FISHER_EPSILON};
use crate::checkpoint::{
    copy_auxiliary_files, CheckpointManifest, CheckpointSet, PlannedWriter, TensorSpec, INDEX_FILE_NAME,
    SINGLE_FILE_NAME,
};
use crate::error::{Error, Result};
use crate::stats::{StatsBundle, StatsKind};

/// Name of the run-metadata file written next to the merged tensors.
pub const METADATA_FILE_NAME: &str = "merge_metadata.json";

/// Version of the tie-breaking and accumulation rules recorded in metadata.
pub const RULES_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct MergeOptions {
    pub shard_bytes_limit: u64,
    pub copy_auxiliary: bool,
    pub write_metadata: bool,
}

impl Default for MergeOptions {
    fn default() -> Self {
        MergeOptions {
            shard_bytes_limit: 5 << 30,
            copy_auxiliary: true,
            write_metadata: true,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Conventions {
    pub rules_version: u32,
    pub sparsity_scope: &'static str,
    pub topk_tie_rule: &'static str,
    pub sign_tie_rule: &'static str,
    pub accumulation: &'static str,
    pub fisher_epsilon_relative: f64,
    pub regmean_jitter: &'static str,
    pub dare_rng: &'static str,
}

impl Default for Conventions {
    fn default() -> Self {
        Conventions {
            rules_version: RULES_VERSION,
            sparsity_scope: "per_tensor",
            topk_tie_rule: "lower_flat_index_first",
            sign_tie_rule: "positive_on_equal_mass",
            accumulation: "f64_per_element_rounded_once",
            fisher_epsilon_relative: FISHER_EPSILON,
            regmean_jitter: "1e-6 * trace / dim",
            dare_rng: "splitmix64(seed, task, fnv1a(key), index)",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelRef {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct StatsRef {
    pub kind: StatsKind,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputSummary {
    pub tensors: usize,
    pub total_params: u64,
    pub shards: usize,
}

/// Contents of the metadata sidecar.
#[derive(Debug, Clone, Serialize)]
pub struct RunMetadata {
    pub tool: &'static str,
    pub version: &'static str,
    pub method: MergeMethod,
    pub recipe: MergeRecipe,
    pub conventions: Conventions,
    pub pretrained: ModelRef,
    pub pretrained_fingerprint: String,
    pub finetuned: Vec<ModelRef>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stats: Option<StatsRef>,
    pub output: OutputSummary,
    pub started_unix_secs: f64,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone)]
pub struct MergeOutput {
    pub manifest: CheckpointManifest,
    pub metadata: RunMetadata,
}

fn model_ref(m: &CheckpointManifest) -> ModelRef {
    ModelRef {
        name: m.name().to_string(),
        path: m.root().to_path_buf(),
    }
}

fn is_tensor_output(name: &str) -> bool {
    name == SINGLE_FILE_NAME
        || name == INDEX_FILE_NAME
        || (name.starts_with("model-") && name.ends_with(".safetensors"))
}

/// Removes tensor files left by an earlier merge into the same directory so
/// they cannot mix with the new shards.
fn clear_previous_output(dir: &Path) -> Result<()> {
    let Ok(items) = fs::read_dir(dir) else {
        return Ok(());
    };
    for item in items.flatten() {
        let name = item.file_name().to_string_lossy().into_owned();
        if is_tensor_output(&name) {
            let p = item.path();
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}

/// Checks that `stats` is what `recipe` needs.
fn check_stats(recipe: &MergeRecipe, stats: Option<&StatsBundle>) -> Result<()> {
    match (StatsKind::for_method(recipe.method), stats) {
        (Some(kind), None) => Err(Error::MissingStats {
            kind: kind.to_string(),
            key: "*".into(),
            task: "*".into(),
        }),
        (Some(kind), Some(b)) if b.kind() != kind => Err(Error::KindMismatch {
            expected: kind.to_string(),
            found: b.kind().to_string(),
        }),
        (None, Some(_)) => Err(Error::InvalidRecipe(format!(
            "{} does not use a statistics bundle",
            recipe.method
        ))),
        _ => Ok(()),
    }
}

/// Merges every parameter of `set` into `out_dir`.
///
/// Parameters are processed one at a time in key order; at most the current
/// group's `n + 1` tensors (plus method scratch) are resident. Output shards
/// follow the pretrained model's layout and dtypes.
pub fn merge_checkpoints(
    set: &CheckpointSet,
    recipe: &MergeRecipe,
    stats: Option<&StatsBundle>,
    out_dir: &Path,
    options: &MergeOptions,
) -> Result<MergeOutput> {
    let started = Instant::now();
    let started_unix_secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64());
    recipe.validate(Some(set.n()))?;
    check_stats(recipe, stats)?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    clear_previous_output(out_dir)?;
    let specs: Vec<TensorSpec> = set
        .pretrained()
        .entries()
        .iter()
        .map(|(key, e)| TensorSpec {
            key: key.clone(),
            shape: e.shape.clone(),
            dtype: e.dtype,
        })
        .collect();
    let mut writer = PlannedWriter::create(out_dir, specs, options.shard_bytes_limit)?;

    for group in set.stream_groups() {
        let group = group?;
        let key = group.key.clone();
        let group_stats = match stats {
            Some(b) => b.group_stats(key.as_str())?,
            None => GroupStats::None,
        };
        let merged = merge_group(recipe, group, group_stats)?;
        writer.write(&key, &merged)?;
    }
    let shards = writer.shard_count();
    let manifest = writer.finish()?;

    if options.copy_auxiliary {
        copy_auxiliary_files(set.pretrained().root(), out_dir)?;
    }

    let mut recorded = recipe.clone();
    if recipe.method == MergeMethod::Dare {
        recorded.seed = Some(recipe.effective_seed());
    }
    let metadata = RunMetadata {
        tool: "mergeforge",
        version: env!("CARGO_PKG_VERSION"),
        method: recipe.method,
        recipe: recorded,
        conventions: Conventions::default(),
        pretrained: model_ref(set.pretrained()),
        pretrained_fingerprint: set.pretrained().fingerprint(),
        finetuned: set.finetuned().iter().map(model_ref).collect(),
        stats: stats.map(|b| StatsRef {
            kind: b.kind(),
            path: b.root().to_path_buf(),
        }),
        output: OutputSummary {
            tensors: manifest.len(),
            total_params: manifest.total_params(),
            shards,
        },
        started_unix_secs,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    if options.write_metadata {
        let path = out_dir.join(METADATA_FILE_NAME);
        let text = serde_json::to_string_pretty(&metadata).expect("metadata serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(MergeOutput { manifest, metadata })
}
