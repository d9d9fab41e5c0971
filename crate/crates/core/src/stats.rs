//! Statistics bundles: Fisher diagonals, Gram matrices and binary masks
//! computed per task by an external extractor.
//!
//! On disk a bundle is a directory:
//!
//! ```text
//! stats/
//!   manifest.json
//!   {task}/{kind}.safetensors     one per task, keyed by parameter name
//! ```
//!
//! `kind` is one of `fisher_diag`, `gram` or `mask`. Gram matrices are stored
//! as raw sums `X^T X` and divided by the task's `sample_count` when read for
//! merging. Masks are `U8` tensors holding 0 or 1.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::algorithms::{GroupStats, MergeMethod};
use crate::checkpoint::{read_raw_entry, CheckpointManifest, CheckpointSet, ParamKey};
use crate::error::{Error, Result};
use crate::safetensors::{self, encode_header, read_header, ElementType, LayoutEntry};
use crate::tensor::{BinaryMask, DType, Tensor};

pub const MANIFEST_FILE_NAME: &str = "manifest.json";

/// Relative tolerance for Gram symmetry, against the largest entry.
pub const GRAM_SYMMETRY_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsKind {
    FisherDiag,
    Gram,
    Mask,
}

impl StatsKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StatsKind::FisherDiag => "fisher_diag",
            StatsKind::Gram => "gram",
            StatsKind::Mask => "mask",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.safetensors", self.as_str())
    }

    /// The bundle kind a merge method consumes, if any.
    pub fn for_method(method: MergeMethod) -> Option<StatsKind> {
        match method {
            MergeMethod::Fisher => Some(StatsKind::FisherDiag),
            MergeMethod::RegMean => Some(StatsKind::Gram),
            MergeMethod::LsTrained => Some(StatsKind::Mask),
            _ => None,
        }
    }
}

impl fmt::Display for StatsKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Number of samples behind each task's statistics: one count for every
/// task, or a map from task name to count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SampleCount {
    Uniform(u64),
    PerTask(BTreeMap<String, u64>),
}

impl SampleCount {
    pub fn for_task(&self, task: &str) -> Option<u64> {
        match self {
            SampleCount::Uniform(n) => Some(*n),
            SampleCount::PerTask(m) => m.get(task).copied(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsManifest {
    pub kind: StatsKind,
    pub task_names: Vec<String>,
    pub sample_count: SampleCount,
    pub base_model_fingerprint: String,
    /// Recorded by the extractor, not interpreted here.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fisher_mode: Option<String>,
    /// Any other fields the extractor wrote, preserved as-is.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl StatsManifest {
    pub fn new(
        kind: StatsKind,
        task_names: Vec<String>,
        sample_count: SampleCount,
        base_model_fingerprint: impl Into<String>,
    ) -> Self {
        StatsManifest {
            kind,
            task_names,
            sample_count,
            base_model_fingerprint: base_model_fingerprint.into(),
            fisher_mode: None,
            extra: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone)]
struct StatsEntry {
    element: ElementType,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
}

#[derive(Debug, Clone)]
struct TaskStats {
    name: String,
    path: PathBuf,
    samples: u64,
    entries: BTreeMap<ParamKey, StatsEntry>,
}

/// A validated bundle, with tasks ordered like the checkpoint set's finetuned
/// models.
#[derive(Debug, Clone)]
pub struct StatsBundle {
    root: PathBuf,
    manifest: StatsManifest,
    tasks: Vec<TaskStats>,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidStats(msg.into())
}

/// Header problems in a stats file are reported as stats errors.
fn as_stats_error(e: Error) -> Error {
    match e {
        Error::MalformedHeader { .. } | Error::OverlappingRanges { .. } => invalid(e.to_string()),
        other => other,
    }
}

/// Opens and fully validates the bundle at `path` (its directory or its
/// `manifest.json`) against a checkpoint set.
///
/// Every tensor is read once, one at a time, so Fisher signs, Gram symmetry
/// and mask values are all checked up front.
pub fn load_stats(path: impl AsRef<Path>, expected: StatsKind, set: &CheckpointSet) -> Result<StatsBundle> {
    let path = path.as_ref();
    let (root, manifest_path) = if path.is_file() {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (root, path.to_path_buf())
    } else {
        (path.to_path_buf(), path.join(MANIFEST_FILE_NAME))
    };
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: StatsManifest = serde_json::from_str(&text)
        .map_err(|e| invalid(format!("{}: {e}", manifest_path.display())))?;

    if manifest.kind != expected {
        return Err(Error::KindMismatch {
            expected: expected.to_string(),
            found: manifest.kind.to_string(),
        });
    }
    let pretrained = set.pretrained();
    let fingerprint = pretrained.fingerprint();
    if manifest.base_model_fingerprint != fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: fingerprint,
            found: manifest.base_model_fingerprint.clone(),
        });
    }

    let bundle_names: BTreeSet<&str> = manifest.task_names.iter().map(String::as_str).collect();
    if bundle_names.len() != manifest.task_names.len() {
        return Err(invalid("task_names contains duplicates"));
    }
    let set_names = set.task_names();
    let wanted: BTreeSet<&str> = set_names.iter().map(String::as_str).collect();
    if bundle_names != wanted {
        return Err(invalid(format!(
            "bundle tasks {:?} do not match the finetuned models {:?}",
            manifest.task_names, set_names
        )));
    }

    let mut tasks = Vec::with_capacity(set_names.len());
    for name in &set_names {
        let samples = manifest
            .sample_count
            .for_task(name)
            .ok_or_else(|| invalid(format!("no sample_count for task {name}")))?;
        if samples == 0 {
            return Err(invalid(format!("sample_count for task {name} is 0")));
        }
        let file = root.join(name).join(expected.file_name());
        let header = read_header(&file).map_err(as_stats_error)?;
        let mut entries = BTreeMap::new();
        for h in header.entries {
            let element = h.element_type().ok_or_else(|| {
                invalid(format!("{}: tensor {} has unsupported dtype {}", file.display(), h.name, h.dtype))
            })?;
            entries.insert(
                ParamKey::new(h.name),
                StatsEntry {
                    element,
                    shape: h.shape,
                    offset: h.offset,
                    byte_len: h.byte_len,
                },
            );
        }
        tasks.push(TaskStats {
            name: name.clone(),
            path: file,
            samples,
            entries,
        });
    }

    let bundle = StatsBundle {
        root,
        manifest,
        tasks,
    };
    bundle.validate(pretrained)?;
    Ok(bundle)
}

impl StatsBundle {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &StatsManifest {
        &self.manifest
    }

    pub fn kind(&self) -> StatsKind {
        self.manifest.kind
    }

    /// Task names in checkpoint-set order.
    pub fn task_names(&self) -> Vec<&str> {
        self.tasks.iter().map(|t| t.name.as_str()).collect()
    }

    /// Whether statistics exist for `key` (for every task, after validation).
    pub fn covers(&self, key: &str) -> bool {
        self.tasks.first().is_some_and(|t| t.entries.contains_key(key))
    }

    fn validate(&self, pretrained: &CheckpointManifest) -> Result<()> {
        let kind = self.kind();
        for task in &self.tasks {
            for key in task.entries.keys() {
                if pretrained.get(key.as_str()).is_none() {
                    return Err(invalid(format!(
                        "task {} has {kind} statistics for unknown tensor {key}",
                        task.name
                    )));
                }
            }
        }
        for (key, param) in pretrained.entries() {
            let present: Vec<bool> = self.tasks.iter().map(|t| t.entries.contains_key(key)).collect();
            let required = kind != StatsKind::Gram || present.iter().any(|&p| p);
            if let Some(i) = present.iter().position(|&p| !p) {
                if required {
                    return Err(Error::MissingStats {
                        kind: kind.to_string(),
                        key: key.to_string(),
                        task: self.tasks[i].name.clone(),
                    });
                }
                continue;
            }
            for i in 0..self.tasks.len() {
                self.check_entry(i, key, &param.shape)?;
            }
        }
        Ok(())
    }

    fn check_entry(&self, task: usize, key: &ParamKey, param_shape: &[usize]) -> Result<()> {
        let t = &self.tasks[task];
        let entry = &t.entries[key];
        let kind = self.kind();
        match kind {
            StatsKind::FisherDiag => {
                self.check_shape(task, key, param_shape, &entry.shape)?;
                let values = self.read_tensor(task, key.as_str())?;
                for (index, &value) in values.values().iter().enumerate() {
                    if value < 0.0 || value.is_nan() {
                        return Err(Error::NegativeFisher {
                            key: key.to_string(),
                            task: t.name.clone(),
                            index,
                            value,
                        });
                    }
                }
            }
            StatsKind::Gram => {
                let side = match param_shape {
                    [_, cols] => *cols,
                    _ => {
                        return Err(Error::GramShapeMismatch {
                            key: key.to_string(),
                            side: 0,
                            found: entry.shape.clone(),
                        })
                    }
                };
                if entry.shape != [side, side] {
                    return Err(Error::GramShapeMismatch {
                        key: key.to_string(),
                        side,
                        found: entry.shape.clone(),
                    });
                }
                let g = self.read_tensor(task, key.as_str())?;
                if !is_symmetric(g.values(), side) {
                    return Err(Error::AsymmetricGram {
                        key: key.to_string(),
                        task: t.name.clone(),
                    });
                }
            }
            StatsKind::Mask => {
                self.check_shape(task, key, param_shape, &entry.shape)?;
                self.read_mask(task, key.as_str())?;
            }
        }
        Ok(())
    }

    fn check_shape(&self, task: usize, key: &ParamKey, expected: &[usize], found: &[usize]) -> Result<()> {
        if expected != found {
            return Err(Error::StatsShapeMismatch {
                kind: self.kind().to_string(),
                key: key.to_string(),
                task: self.tasks[task].name.clone(),
                expected: expected.to_vec(),
                found: found.to_vec(),
            });
        }
        Ok(())
    }

    fn entry(&self, task: usize, key: &str) -> Result<&StatsEntry> {
        let t = &self.tasks[task];
        t.entries.get(key).ok_or_else(|| Error::MissingStats {
            kind: self.kind().to_string(),
            key: key.to_string(),
            task: t.name.clone(),
        })
    }

    /// A float statistic exactly as stored (Gram matrices unnormalized).
    pub fn read_tensor(&self, task: usize, key: &str) -> Result<Tensor> {
        let entry = self.entry(task, key)?;
        let ElementType::Float(dtype) = entry.element else {
            return Err(invalid(format!("{} statistics for {key} must be floating point", self.kind())));
        };
        let path = &self.tasks[task].path;
        let stream_err = |source| Error::StreamRead {
            key: key.to_string(),
            source,
        };
        let mut file = File::open(path).map_err(stream_err)?;
        let values = safetensors::read_f32_values(&mut file, entry.offset, entry.byte_len, dtype)
            .map_err(stream_err)?;
        Tensor::new(entry.shape.clone(), dtype, values).map_err(|e| invalid(e.to_string()))
    }

    pub fn read_mask(&self, task: usize, key: &str) -> Result<BinaryMask> {
        let entry = self.entry(task, key)?;
        if entry.element != ElementType::U8 {
            return Err(invalid(format!("mask for {key} must be stored as U8")));
        }
        let bytes = read_raw_entry(&self.tasks[task].path, key, entry.offset, entry.byte_len)?;
        let mut bools = Vec::with_capacity(bytes.len());
        for b in bytes {
            match b {
                0 => bools.push(false),
                1 => bools.push(true),
                _ => {
                    return Err(Error::InvalidMaskValue {
                        key: key.to_string(),
                        task: self.tasks[task].name.clone(),
                    })
                }
            }
        }
        BinaryMask::from_bools(entry.shape.clone(), &bools).map_err(|e| invalid(e.to_string()))
    }

    /// Statistics for one parameter across all tasks, ready for
    /// [`crate::algorithms::merge_group`]. Gram matrices are divided by each
    /// task's sample count; a parameter without Gram statistics yields
    /// `GroupStats::Gram(None)`.
    pub fn group_stats(&self, key: &str) -> Result<GroupStats> {
        let n = self.tasks.len();
        Ok(match self.kind() {
            StatsKind::FisherDiag => GroupStats::Fisher((0..n).map(|i| self.read_tensor(i, key)).collect::<Result<_>>()?),
            StatsKind::Gram => {
                if !self.covers(key) {
                    return Ok(GroupStats::Gram(None));
                }
                let grams = (0..n)
                    .map(|i| {
                        let mut g = self.read_tensor(i, key)?.cast(DType::F32);
                        let scale = 1.0 / self.tasks[i].samples as f64;
                        g.values_mut().iter_mut().for_each(|x| *x = (*x as f64 * scale) as f32);
                        Ok(g)
                    })
                    .collect::<Result<_>>()?;
                GroupStats::Gram(Some(grams))
            }
            StatsKind::Mask => GroupStats::Masks((0..n).map(|i| self.read_mask(i, key)).collect::<Result<_>>()?),
        })
    }
}

fn is_symmetric(values: &[f32], side: usize) -> bool {
    let max = values.iter().fold(0.0f64, |m, v| m.max((*v as f64).abs()));
    if !max.is_finite() {
        return false;
    }
    let tol = GRAM_SYMMETRY_TOLERANCE * max;
    (0..side).all(|r| {
        (r + 1..side).all(|c| ((values[r * side + c] - values[c * side + r]) as f64).abs() <= tol)
    })
}

/// One stored statistic.
#[derive(Debug, Clone, PartialEq)]
pub enum StatsTensor {
    Float(Tensor),
    Mask(BinaryMask),
}

/// Writes a bundle directory. `tasks` pairs each task name with its
/// statistics; keys are written in sorted order.
pub fn write_stats_bundle(
    dir: impl AsRef<Path>,
    manifest: &StatsManifest,
    tasks: &[(String, Vec<(ParamKey, StatsTensor)>)],
) -> Result<()> {
    let dir = dir.as_ref();
    for (name, tensors) in tasks {
        let task_dir = dir.join(name);
        fs::create_dir_all(&task_dir).map_err(|e| Error::io(&task_dir, e))?;
        let mut sorted: Vec<&(ParamKey, StatsTensor)> = tensors.iter().collect();
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        let layout: Vec<LayoutEntry> = sorted
            .iter()
            .map(|(key, t)| match t {
                StatsTensor::Float(t) => LayoutEntry {
                    name: key.to_string(),
                    dtype: t.dtype().as_str(),
                    shape: t.shape().to_vec(),
                    byte_len: t.byte_len() as u64,
                },
                StatsTensor::Mask(m) => LayoutEntry {
                    name: key.to_string(),
                    dtype: ElementType::U8.as_str(),
                    shape: m.shape().to_vec(),
                    byte_len: m.len() as u64,
                },
            })
            .collect();
        let path = task_dir.join(manifest.kind.file_name());
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(&path, e);
        w.write_all(&encode_header(&layout, &BTreeMap::new())).map_err(io)?;
        for (_, t) in sorted {
            match t {
                StatsTensor::Float(t) => safetensors::write_f32_values(&mut w, t.values(), t.dtype()).map_err(io)?,
                StatsTensor::Mask(m) => {
                    let bytes: Vec<u8> = m.to_bools().into_iter().map(u8::from).collect();
                    w.write_all(&bytes).map_err(io)?;
                }
            }
        }
        w.flush().map_err(io)?;
    }
    let path = dir.join(MANIFEST_FILE_NAME);
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}
