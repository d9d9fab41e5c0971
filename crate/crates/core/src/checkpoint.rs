//! Sharded safetensors checkpoints: manifests, compatibility checks across a
//! pretrained model and its finetuned descendants, aligned streaming of
//! parameter groups, and the writer.

use std::borrow::Borrow;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::fnv1a;
use crate::safetensors::{self, ElementType, FileHeader, LayoutEntry};
use crate::tensor::{numel, DType, Tensor};

pub const SINGLE_FILE_NAME: &str = "model.safetensors";
pub const INDEX_FILE_NAME: &str = "model.safetensors.index.json";

/// Tensor name within a checkpoint, e.g. `model.layers.0.mlp.up_proj.weight`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamKey(String);

impl ParamKey {
    pub fn new(name: impl Into<String>) -> Self {
        ParamKey(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Borrow<str> for ParamKey {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl From<&str> for ParamKey {
    fn from(s: &str) -> Self {
        ParamKey(s.to_string())
    }
}

impl From<String> for ParamKey {
    fn from(s: String) -> Self {
        ParamKey(s)
    }
}

/// Where one tensor lives on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub shard: PathBuf,
    /// Absolute offset of the first data byte in `shard`.
    pub offset: u64,
    pub byte_len: u64,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }
}

#[derive(Debug, Clone)]
pub struct CheckpointManifest {
    name: String,
    root: PathBuf,
    entries: BTreeMap<ParamKey, TensorEntry>,
    total_params: u64,
}

impl CheckpointManifest {
    fn from_entries(name: String, root: PathBuf, entries: BTreeMap<ParamKey, TensorEntry>) -> Self {
        let total_params = entries.values().map(|e| e.numel() as u64).sum();
        CheckpointManifest {
            name,
            root,
            entries,
            total_params,
        }
    }

    /// Display name, taken from the checkpoint's directory (or file stem).
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    /// Directory containing the checkpoint's files.
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &BTreeMap<ParamKey, TensorEntry> {
        &self.entries
    }

    pub fn get(&self, key: &str) -> Option<&TensorEntry> {
        self.entries.get(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total parameter count `d`.
    pub fn total_params(&self) -> u64 {
        self.total_params
    }

    pub fn total_bytes(&self) -> u64 {
        self.entries.values().map(|e| e.byte_len).sum()
    }

    pub fn max_tensor_bytes(&self) -> u64 {
        self.entries.values().map(|e| e.byte_len).max().unwrap_or(0)
    }

    pub fn shard_files(&self) -> Vec<PathBuf> {
        let mut files: Vec<PathBuf> = self.entries.values().map(|e| e.shard.clone()).collect();
        files.sort();
        files.dedup();
        files
    }

    /// 64-bit hash of the key set and shapes, rendered as 16 hex digits.
    pub fn fingerprint(&self) -> String {
        let mut text = String::new();
        for (key, entry) in &self.entries {
            text.push_str(key.as_str());
            text.push(':');
            for d in &entry.shape {
                text.push_str(&d.to_string());
                text.push(',');
            }
            text.push(';');
        }
        format!("{:016x}", fnv1a(text.as_bytes()))
    }

    pub fn read_tensor(&self, key: &str) -> Result<Tensor> {
        let entry = self.entries.get(key).ok_or_else(|| {
            Error::InvalidRecipe(format!("checkpoint {} has no tensor {key}", self.name))
        })?;
        read_entry(key, entry)
    }

    /// Checks that every tensor's bytes are present and readable, without
    /// decoding them.
    pub fn shard_lengths_ok(&self) -> Result<()> {
        for file in self.shard_files() {
            let len = fs::metadata(&file).map_err(|e| Error::io(&file, e))?.len();
            for (key, e) in &self.entries {
                if e.shard == file && e.offset + e.byte_len > len {
                    return Err(Error::MalformedHeader {
                        path: file.clone(),
                        reason: format!("tensor {key} extends past end of file"),
                    });
                }
            }
        }
        Ok(())
    }
}

fn read_entry(key: &str, entry: &TensorEntry) -> Result<Tensor> {
    let stream_err = |source| Error::StreamRead {
        key: key.to_string(),
        source,
    };
    let mut file = File::open(&entry.shard).map_err(stream_err)?;
    let values = safetensors::read_f32_values(&mut file, entry.offset, entry.byte_len, entry.dtype)
        .map_err(stream_err)?;
    Tensor::new(entry.shape.clone(), entry.dtype, values)
}

fn float_entries(header: &FileHeader) -> Result<BTreeMap<ParamKey, TensorEntry>> {
    let mut out = BTreeMap::new();
    for e in &header.entries {
        let dtype = match e.element_type() {
            Some(ElementType::Float(d)) => d,
            _ => {
                return Err(Error::UnsupportedDtype {
                    key: e.name.clone(),
                    dtype: e.dtype.clone(),
                })
            }
        };
        if e.shape.contains(&0) {
            return Err(Error::MalformedHeader {
                path: header.path.clone(),
                reason: format!("tensor {} has a zero-sized dimension", e.name),
            });
        }
        out.insert(
            ParamKey::new(e.name.clone()),
            TensorEntry {
                shape: e.shape.clone(),
                dtype,
                shard: header.path.clone(),
                offset: e.offset,
                byte_len: e.byte_len,
            },
        );
    }
    Ok(out)
}

#[derive(Deserialize)]
struct ShardIndex {
    weight_map: BTreeMap<String, String>,
}

fn display_name(path: &Path) -> String {
    let stem = if path.is_dir() {
        path.file_name()
    } else {
        match path.file_stem() {
            Some(s) if s != "model" => Some(s),
            _ => path.parent().and_then(Path::file_name),
        }
    };
    stem.map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Locates every tensor of a checkpoint. `path` is either a `.safetensors`
/// file or a directory holding one such file, a set of shards with a
/// `*.safetensors.index.json`, or a set of shards without an index.
pub fn open_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let path = path.as_ref();
    let name = display_name(path);
    if path.is_file() {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let header = safetensors::read_header(path)?;
        return Ok(CheckpointManifest::from_entries(name, root, float_entries(&header)?));
    }
    if !path.is_dir() {
        return Err(Error::NoCheckpoint {
            path: path.to_path_buf(),
        });
    }

    let mut index_files = Vec::new();
    let mut shard_files = Vec::new();
    for item in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        let p = item.map_err(|e| Error::io(path, e))?.path();
        let fname = p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        if fname.ends_with(".safetensors.index.json") {
            index_files.push(p);
        } else if fname.ends_with(".safetensors") && p.is_file() {
            shard_files.push(p);
        }
    }
    index_files.sort();
    shard_files.sort();

    let entries = match index_files.as_slice() {
        [index] => open_indexed(index, path)?,
        [] if shard_files.is_empty() => {
            return Err(Error::NoCheckpoint {
                path: path.to_path_buf(),
            })
        }
        [] => {
            let mut all = BTreeMap::new();
            for shard in &shard_files {
                for (key, entry) in float_entries(&safetensors::read_header(shard)?)? {
                    if all.contains_key(&key) {
                        return Err(Error::DuplicateKey(key.to_string()));
                    }
                    all.insert(key, entry);
                }
            }
            all
        }
        _ => {
            return Err(Error::MalformedHeader {
                path: path.to_path_buf(),
                reason: "more than one shard index file".into(),
            })
        }
    };
    Ok(CheckpointManifest::from_entries(name, path.to_path_buf(), entries))
}

fn open_indexed(index_path: &Path, root: &Path) -> Result<BTreeMap<ParamKey, TensorEntry>> {
    let text = fs::read_to_string(index_path).map_err(|e| Error::io(index_path, e))?;
    let index: ShardIndex = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: index_path.to_path_buf(),
        source: e,
    })?;

    let mut by_shard: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (key, shard) in &index.weight_map {
        by_shard.entry(shard.as_str()).or_default().push(key.as_str());
    }
    let mut entries = BTreeMap::new();
    for (shard, keys) in by_shard {
        let shard_path = root.join(shard);
        if !shard_path.is_file() {
            return Err(Error::MissingShard { path: shard_path });
        }
        let mut found = float_entries(&safetensors::read_header(&shard_path)?)?;
        if found.len() != keys.len() {
            return Err(Error::MalformedHeader {
                path: shard_path,
                reason: format!(
                    "index lists {} tensors for this shard but it holds {}",
                    keys.len(),
                    found.len()
                ),
            });
        }
        for key in keys {
            let entry = found.remove(key).ok_or_else(|| Error::MalformedHeader {
                path: shard_path.clone(),
                reason: format!("index maps {key} to this shard but it is not there"),
            })?;
            entries.insert(ParamKey::new(key), entry);
        }
    }
    Ok(entries)
}

/// One way two manifests disagree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mismatch {
    /// `key` is present in one of the two models but not the other.
    KeyMismatch { key: String, model: String },
    ShapeMismatch {
        key: String,
        model: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    DtypeMismatch {
        key: String,
        model: String,
        expected: DType,
        found: DType,
    },
}

impl Mismatch {
    pub fn key(&self) -> &str {
        match self {
            Mismatch::KeyMismatch { key, .. }
            | Mismatch::ShapeMismatch { key, .. }
            | Mismatch::DtypeMismatch { key, .. } => key,
        }
    }
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mismatch::KeyMismatch { key, model } => {
                write!(f, "KeyMismatch({key}): present in only one of pretrained / {model}")
            }
            Mismatch::ShapeMismatch {
                key,
                model,
                expected,
                found,
            } => write!(f, "ShapeMismatch({key}): {model} has {found:?}, pretrained {expected:?}"),
            Mismatch::DtypeMismatch {
                key,
                model,
                expected,
                found,
            } => write!(f, "DtypeMismatch({key}): {model} has {found}, pretrained {expected}"),
        }
    }
}

/// Mismatches between the pretrained manifest and the finetuned ones.
/// Holds at most [`IncompatibilityReport::LIMIT`] entries; `total` counts all.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IncompatibilityReport {
    pub mismatches: Vec<Mismatch>,
    pub total: usize,
}

impl IncompatibilityReport {
    pub const LIMIT: usize = 10;

    fn push(&mut self, m: Mismatch) {
        if self.mismatches.len() < Self::LIMIT {
            self.mismatches.push(m);
        }
        self.total += 1;
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }
}

impl fmt::Display for IncompatibilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} mismatched key(s)", self.total)?;
        for m in &self.mismatches {
            write!(f, "; {m}")?;
        }
        if self.total > self.mismatches.len() {
            write!(f, "; ...")?;
        }
        Ok(())
    }
}

/// Compares each finetuned manifest against the pretrained one.
pub fn compare_manifests(
    pretrained: &CheckpointManifest,
    finetuned: &[CheckpointManifest],
) -> IncompatibilityReport {
    let mut report = IncompatibilityReport::default();
    for ft in finetuned {
        let model = ft.name().to_string();
        let keys: std::collections::BTreeSet<&ParamKey> =
            pretrained.keys().chain(ft.keys()).collect();
        for key in keys {
            match (pretrained.entries.get(key), ft.entries.get(key)) {
                (Some(p), Some(f)) => {
                    if p.shape != f.shape {
                        report.push(Mismatch::ShapeMismatch {
                            key: key.to_string(),
                            model: model.clone(),
                            expected: p.shape.clone(),
                            found: f.shape.clone(),
                        });
                    } else if p.dtype != f.dtype {
                        report.push(Mismatch::DtypeMismatch {
                            key: key.to_string(),
                            model: model.clone(),
                            expected: p.dtype,
                            found: f.dtype,
                        });
                    }
                }
                _ => report.push(Mismatch::KeyMismatch {
                    key: key.to_string(),
                    model: model.clone(),
                }),
            }
        }
    }
    report
}

/// A pretrained model plus `n >= 1` finetuned models with identical tensor
/// layouts.
#[derive(Debug, Clone)]
pub struct CheckpointSet {
    pretrained: CheckpointManifest,
    finetuned: Vec<CheckpointManifest>,
}

pub fn validate_set(
    pretrained: CheckpointManifest,
    finetuned: Vec<CheckpointManifest>,
) -> Result<CheckpointSet> {
    if finetuned.is_empty() {
        return Err(Error::NoFinetunedModels);
    }
    let report = compare_manifests(&pretrained, &finetuned);
    if !report.is_empty() {
        return Err(Error::Incompatible(report));
    }
    Ok(CheckpointSet {
        pretrained,
        finetuned,
    })
}

impl CheckpointSet {
    pub fn pretrained(&self) -> &CheckpointManifest {
        &self.pretrained
    }

    pub fn finetuned(&self) -> &[CheckpointManifest] {
        &self.finetuned
    }

    /// Number of finetuned models.
    pub fn n(&self) -> usize {
        self.finetuned.len()
    }

    pub fn task_names(&self) -> Vec<String> {
        self.finetuned.iter().map(|m| m.name().to_string()).collect()
    }

    /// Iterates parameter groups in lexicographic key order.
    pub fn stream_groups(&self) -> GroupStream<'_> {
        GroupStream {
            set: self,
            keys: self.pretrained.entries.iter(),
            failed: false,
        }
    }
}

/// Stream of aligned parameter groups over a [`CheckpointSet`].
pub fn stream_groups(set: &CheckpointSet) -> GroupStream<'_> {
    set.stream_groups()
}

/// One parameter across every model in a set.
#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub key: ParamKey,
    pub pretrained: Tensor,
    pub finetuned: Vec<Tensor>,
}

pub struct GroupStream<'a> {
    set: &'a CheckpointSet,
    keys: std::collections::btree_map::Iter<'a, ParamKey, TensorEntry>,
    failed: bool,
}

impl GroupStream<'_> {
    fn load(&self, key: &ParamKey, pre: &TensorEntry) -> Result<ParamGroup> {
        let pretrained = read_entry(key.as_str(), pre)?;
        let finetuned = self
            .set
            .finetuned
            .iter()
            .map(|m| read_entry(key.as_str(), &m.entries[key]))
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamGroup {
            key: key.clone(),
            pretrained,
            finetuned,
        })
    }
}

impl Iterator for GroupStream<'_> {
    type Item = Result<ParamGroup>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let (key, entry) = self.keys.next()?;
        let group = self.load(key, entry);
        self.failed = group.is_err();
        Some(group)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        if self.failed {
            (0, Some(0))
        } else {
            self.keys.size_hint()
        }
    }
}

/// A tensor's name and storage layout, used to plan output shards before any
/// data exists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub key: ParamKey,
    pub shape: Vec<usize>,
    pub dtype: DType,
}

impl TensorSpec {
    pub fn byte_len(&self) -> u64 {
        (numel(&self.shape) * self.dtype.byte_width()) as u64
    }

    fn layout(&self) -> LayoutEntry {
        LayoutEntry {
            name: self.key.to_string(),
            dtype: self.dtype.as_str(),
            shape: self.shape.clone(),
            byte_len: self.byte_len(),
        }
    }
}

/// Greedy split in arrival order: a shard is closed when the next tensor
/// would push it past `limit`. A tensor larger than `limit` gets its own
/// shard.
fn split_shards(sizes: &[u64], limit: u64) -> Vec<std::ops::Range<usize>> {
    let mut shards = Vec::new();
    let mut start = 0;
    let mut bytes = 0u64;
    for (i, &size) in sizes.iter().enumerate() {
        if i > start && bytes + size > limit {
            shards.push(start..i);
            start = i;
            bytes = 0;
        }
        bytes += size;
    }
    if start < sizes.len() || shards.is_empty() {
        shards.push(start..sizes.len());
    }
    shards
}

fn shard_file_name(i: usize, count: usize) -> String {
    if count == 1 {
        SINGLE_FILE_NAME.to_string()
    } else {
        format!("model-{:05}-of-{:05}.safetensors", i + 1, count)
    }
}

fn default_metadata() -> BTreeMap<String, String> {
    BTreeMap::from([("format".to_string(), "pt".to_string())])
}

#[derive(Serialize)]
struct IndexMetadata {
    total_size: u64,
}

#[derive(Serialize)]
struct IndexFile<'a> {
    metadata: IndexMetadata,
    weight_map: BTreeMap<&'a str, &'a str>,
}

fn write_index(dir: &Path, weight_map: &BTreeMap<String, String>, total_size: u64) -> Result<()> {
    let index = IndexFile {
        metadata: IndexMetadata { total_size },
        weight_map: weight_map
            .iter()
            .map(|(k, v)| (k.as_str(), v.as_str()))
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&index).expect("index serializes");
    text.push('\n');
    let path = dir.join(INDEX_FILE_NAME);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Writes tensors whose names, shapes, and dtypes are known up front. Headers
/// are emitted before any data, so each tensor is encoded straight to disk as
/// it arrives and never buffered.
pub struct PlannedWriter {
    dir: PathBuf,
    specs: Vec<TensorSpec>,
    shards: Vec<std::ops::Range<usize>>,
    next: usize,
    current: Option<(usize, BufWriter<File>, PathBuf)>,
}

impl PlannedWriter {
    pub fn create(dir: impl AsRef<Path>, specs: Vec<TensorSpec>, shard_bytes_limit: u64) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let mut seen = HashSet::new();
        for s in &specs {
            if !seen.insert(s.key.as_str()) {
                return Err(Error::DuplicateKey(s.key.to_string()));
            }
        }
        let sizes: Vec<u64> = specs.iter().map(TensorSpec::byte_len).collect();
        let shards = split_shards(&sizes, shard_bytes_limit.max(1));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(PlannedWriter {
            dir,
            specs,
            shards,
            next: 0,
            current: None,
        })
    }

    pub fn shard_count(&self) -> usize {
        self.shards.len()
    }

    /// Key the writer expects next, if any.
    pub fn expected_key(&self) -> Option<&ParamKey> {
        self.specs.get(self.next).map(|s| &s.key)
    }

    fn open_shard(&mut self, shard: usize) -> Result<()> {
        self.close_shard()?;
        let name = shard_file_name(shard, self.shards.len());
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::with_capacity(1 << 20, file);
        let layout: Vec<LayoutEntry> = self.specs[self.shards[shard].clone()]
            .iter()
            .map(TensorSpec::layout)
            .collect();
        w.write_all(&safetensors::encode_header(&layout, &default_metadata()))
            .map_err(|e| Error::io(&path, e))?;
        self.current = Some((shard, w, path));
        Ok(())
    }

    fn close_shard(&mut self) -> Result<()> {
        if let Some((_, mut w, path)) = self.current.take() {
            w.flush().map_err(|e| Error::io(&path, e))?;
            w.into_inner()
                .map_err(|e| Error::io(&path, e.into_error()))?
                .sync_all()
                .map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Appends the next tensor; it must match the planned key, shape, and dtype.
    pub fn write(&mut self, key: &ParamKey, tensor: &Tensor) -> Result<()> {
        let spec = self.specs.get(self.next).ok_or_else(|| Error::UnexpectedKey {
            key: key.to_string(),
            expected: "end of plan".into(),
        })?;
        if &spec.key != key {
            return Err(Error::UnexpectedKey {
                key: key.to_string(),
                expected: spec.key.to_string(),
            });
        }
        if spec.shape != tensor.shape() {
            return Err(Error::shape(key, &spec.shape, tensor.shape()));
        }
        let dtype = spec.dtype;
        let shard = self
            .shards
            .iter()
            .position(|r| r.contains(&self.next))
            .expect("every tensor is in a shard");
        if self.current.as_ref().map(|c| c.0) != Some(shard) {
            self.open_shard(shard)?;
        }
        let (_, w, path) = self.current.as_mut().expect("shard open");
        // Encoding at the planned dtype rounds values if the tensor differs.
        safetensors::write_f32_values(w, tensor.values(), dtype)
            .map_err(|e| Error::io(path.clone(), e))?;
        self.next += 1;
        Ok(())
    }

    /// Closes the last shard, writes the index when there are several shards,
    /// and returns the manifest of what was written.
    pub fn finish(mut self) -> Result<CheckpointManifest> {
        if self.next != self.specs.len() {
            return Err(Error::UnexpectedKey {
                key: "end of stream".into(),
                expected: self.specs[self.next].key.to_string(),
            });
        }
        // An empty plan still produces a (header-only) file.
        if self.current.is_none() && self.specs.is_empty() {
            self.open_shard(0)?;
        }
        self.close_shard()?;
        if self.shards.len() > 1 {
            let mut weight_map = BTreeMap::new();
            for (i, range) in self.shards.iter().enumerate() {
                for s in &self.specs[range.clone()] {
                    weight_map.insert(s.key.to_string(), shard_file_name(i, self.shards.len()));
                }
            }
            let total: u64 = self.specs.iter().map(TensorSpec::byte_len).sum();
            write_index(&self.dir, &weight_map, total)?;
        }
        open_checkpoint(&self.dir)
    }
}

/// Writes an arbitrary stream of tensors. Shapes are not known in advance, so
/// each shard's data is spooled to a temporary file and copied behind its
/// header once the shard is complete.
pub fn write_checkpoint<I>(tensors: I, dir: impl AsRef<Path>, shard_bytes_limit: u64) -> Result<CheckpointManifest>
where
    I: IntoIterator<Item = (ParamKey, Tensor)>,
{
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let limit = shard_bytes_limit.max(1);

    struct Spool {
        path: PathBuf,
        writer: BufWriter<File>,
        layout: Vec<LayoutEntry>,
        bytes: u64,
    }
    let new_spool = |i: usize| -> Result<Spool> {
        let path = dir.join(format!(".spool-{i:05}.tmp"));
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Spool {
            path,
            writer: BufWriter::with_capacity(1 << 20, file),
            layout: Vec::new(),
            bytes: 0,
        })
    };
    let cleanup = |spools: &[Spool]| {
        for s in spools {
            let _ = fs::remove_file(&s.path);
        }
    };

    let mut seen = HashSet::new();
    let mut spools = vec![new_spool(0)?];
    for (key, tensor) in tensors {
        if !seen.insert(key.clone()) {
            cleanup(&spools);
            return Err(Error::DuplicateKey(key.to_string()));
        }
        let size = tensor.byte_len() as u64;
        let last = spools.last().expect("at least one spool");
        if !last.layout.is_empty() && last.bytes + size > limit {
            let next = match new_spool(spools.len()) {
                Ok(s) => s,
                Err(e) => {
                    cleanup(&spools);
                    return Err(e);
                }
            };
            spools.push(next);
        }
        let spool = spools.last_mut().expect("at least one spool");
        if let Err(e) = safetensors::write_f32_values(&mut spool.writer, tensor.values(), tensor.dtype()) {
            let path = spool.path.clone();
            cleanup(&spools);
            return Err(Error::io(path, e));
        }
        spool.layout.push(LayoutEntry {
            name: key.to_string(),
            dtype: tensor.dtype().as_str(),
            shape: tensor.shape().to_vec(),
            byte_len: size,
        });
        spool.bytes += size;
    }

    let count = spools.len();
    let mut weight_map = BTreeMap::new();
    let mut total = 0u64;
    let mut result = Ok(());
    for (i, spool) in spools.iter_mut().enumerate() {
        if result.is_err() {
            break;
        }
        let name = shard_file_name(i, count);
        for e in &spool.layout {
            weight_map.insert(e.name.clone(), name.clone());
            total += e.byte_len;
        }
        result = (|| -> Result<()> {
            spool.writer.flush().map_err(|e| Error::io(&spool.path, e))?;
            let out_path = dir.join(&name);
            let mut out = BufWriter::new(File::create(&out_path).map_err(|e| Error::io(&out_path, e))?);
            out.write_all(&safetensors::encode_header(&spool.layout, &default_metadata()))
                .map_err(|e| Error::io(&out_path, e))?;
            let mut data = File::open(&spool.path).map_err(|e| Error::io(&spool.path, e))?;
            std::io::copy(&mut data, &mut out).map_err(|e| Error::io(&out_path, e))?;
            out.flush().map_err(|e| Error::io(&out_path, e))?;
            Ok(())
        })();
    }
    cleanup(&spools);
    result?;
    if count > 1 {
        write_index(dir, &weight_map, total)?;
    }
    open_checkpoint(dir)
}

/// Reads every tensor of a manifest into memory, in key order.
pub fn read_all(manifest: &CheckpointManifest) -> Result<Vec<(ParamKey, Tensor)>> {
    manifest
        .entries()
        .iter()
        .map(|(k, e)| Ok((k.clone(), read_entry(k.as_str(), e)?)))
        .collect()
}

/// Raw bytes of one tensor (any element type), for auxiliary formats.
pub(crate) fn read_raw_entry(path: &Path, key: &str, offset: u64, byte_len: u64) -> Result<Vec<u8>> {
    let stream_err = |source| Error::StreamRead {
        key: key.to_string(),
        source,
    };
    let mut file = File::open(path).map_err(stream_err)?;
    safetensors::read_raw(&mut file, offset, byte_len).map_err(stream_err)
}

/// Copies non-tensor files (tokenizer, config, ...) from a pretrained model
/// directory into `out_dir`. Safetensors data and index files are skipped.
pub fn copy_auxiliary_files(pretrained_root: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut copied = Vec::new();
    if !pretrained_root.is_dir() {
        return Ok(copied);
    }
    let mut items: Vec<PathBuf> = fs::read_dir(pretrained_root)
        .map_err(|e| Error::io(pretrained_root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    items.sort();
    for p in items {
        let fname = p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        if fname.ends_with(".safetensors") || fname.ends_with(".safetensors.index.json") {
            continue;
        }
        let dest = out_dir.join(&fname);
        fs::copy(&p, &dest).map_err(|e| Error::io(&dest, e))?;
        copied.push(dest);
    }
    Ok(copied)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], fill: f32) -> Tensor {
        let n = numel(shape);
        Tensor::from_f32(shape.to_vec(), (0..n).map(|i| fill + i as f32).collect()).unwrap()
    }

    #[test]
    fn single_file_with_two_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_checkpoint(
            vec![(ParamKey::from("a"), t(&[2, 2], 0.0)), (ParamKey::from("b"), t(&[3], 1.0))],
            dir.path(),
            u64::MAX,
        )
        .unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.total_params(), 7);
        assert!(dir.path().join(SINGLE_FILE_NAME).is_file());
        assert!(!dir.path().join(INDEX_FILE_NAME).exists());
        let reopened = open_checkpoint(dir.path().join(SINGLE_FILE_NAME)).unwrap();
        assert_eq!(reopened.read_tensor("a").unwrap(), t(&[2, 2], 0.0));
    }

    #[test]
    fn sharded_checkpoint_with_index() {
        let dir = tempfile::tempdir().unwrap();
        // 16 + 16 + 12 bytes with a 32-byte limit: {a, b} and {c}.
        let tensors = vec![
            (ParamKey::from("a"), t(&[4], 0.0)),
            (ParamKey::from("b"), t(&[4], 10.0)),
            (ParamKey::from("c"), t(&[3], 20.0)),
        ];
        let m = write_checkpoint(tensors.clone(), dir.path(), 32).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.shard_files().len(), 2);
        let index: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(INDEX_FILE_NAME)).unwrap())
                .unwrap();
        assert_eq!(index["metadata"]["total_size"], 44);
        assert_eq!(index["weight_map"]["c"], "model-00002-of-00002.safetensors");
        for (k, v) in tensors {
            assert_eq!(m.read_tensor(k.as_str()).unwrap(), v);
        }
        // No spool files left behind.
        let leftovers = fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".tmp"))
            .count();
        assert_eq!(leftovers, 0);
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = write_checkpoint(
            vec![(ParamKey::from("a"), t(&[1], 0.0)), (ParamKey::from("a"), t(&[1], 0.0))],
            dir.path(),
            u64::MAX,
        );
        assert!(matches!(err, Err(Error::DuplicateKey(k)) if k == "a"));
        let err = PlannedWriter::create(
            dir.path(),
            vec![
                TensorSpec { key: "x".into(), shape: vec![1], dtype: DType::F32 },
                TensorSpec { key: "x".into(), shape: vec![1], dtype: DType::F32 },
            ],
            u64::MAX,
        );
        assert!(matches!(err, Err(Error::DuplicateKey(_))));
    }

    #[test]
    fn missing_shard_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_checkpoint(
            vec![(ParamKey::from("a"), t(&[4], 0.0)), (ParamKey::from("b"), t(&[4], 0.0))],
            dir.path(),
            16,
        )
        .unwrap();
        fs::remove_file(dir.path().join("model-00002-of-00002.safetensors")).unwrap();
        assert!(matches!(open_checkpoint(dir.path()), Err(Error::MissingShard { .. })));
    }

    #[test]
    fn unsupported_dtype_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let json = r#"{"ids":{"dtype":"I64","shape":[1],"data_offsets":[0,8]}}"#;
        let mut bytes = (json.len() as u64).to_le_bytes().to_vec();
        bytes.extend(json.as_bytes());
        bytes.extend([0u8; 8]);
        let p = dir.path().join("m.safetensors");
        fs::write(&p, bytes).unwrap();
        assert!(matches!(open_checkpoint(&p), Err(Error::UnsupportedDtype { .. })));
    }

    #[test]
    fn nonexistent_path() {
        let err = open_checkpoint("/definitely/not/here");
        assert!(matches!(err, Err(Error::NoCheckpoint { .. })));
    }

    fn manifest_with(dir: &Path, name: &str, tensors: Vec<(&str, Tensor)>) -> CheckpointManifest {
        let d = dir.join(name);
        write_checkpoint(
            tensors.into_iter().map(|(k, v)| (ParamKey::from(k), v)),
            &d,
            u64::MAX,
        )
        .unwrap()
    }

    #[test]
    fn validate_set_examples() {
        let dir = tempfile::tempdir().unwrap();
        let base = vec![("lm_head.weight", t(&[4, 4], 0.0)), ("norm", t(&[4], 0.0))];
        let pre = manifest_with(dir.path(), "pre", base.clone());
        let a = manifest_with(dir.path(), "a", base.clone());
        let b = manifest_with(dir.path(), "b", base.clone());
        let set = validate_set(pre.clone(), vec![a.clone(), b]).unwrap();
        assert_eq!(set.n(), 2);
        assert_eq!(set.task_names(), vec!["a", "b"]);

        let missing = manifest_with(dir.path(), "missing", vec![("norm", t(&[4], 0.0))]);
        match validate_set(pre.clone(), vec![a.clone(), missing]) {
            Err(Error::Incompatible(r)) => {
                assert_eq!(r.mismatches[0].key(), "lm_head.weight");
                assert!(matches!(r.mismatches[0], Mismatch::KeyMismatch { .. }));
            }
            other => panic!("expected KeyMismatch, got {other:?}"),
        }

        let wide = manifest_with(
            dir.path(),
            "wide",
            vec![("lm_head.weight", t(&[4, 5], 0.0)), ("norm", t(&[4], 0.0))],
        );
        match validate_set(pre.clone(), vec![wide]) {
            Err(Error::Incompatible(r)) => {
                assert!(matches!(&r.mismatches[0], Mismatch::ShapeMismatch { key, .. } if key == "lm_head.weight"));
            }
            other => panic!("expected ShapeMismatch, got {other:?}"),
        }

        let half = manifest_with(
            dir.path(),
            "half",
            vec![("lm_head.weight", t(&[4, 4], 0.0).cast(DType::F16)), ("norm", t(&[4], 0.0))],
        );
        match validate_set(pre.clone(), vec![half]) {
            Err(Error::Incompatible(r)) => {
                assert!(matches!(&r.mismatches[0], Mismatch::DtypeMismatch { .. }));
            }
            other => panic!("expected DtypeMismatch, got {other:?}"),
        }

        assert!(matches!(validate_set(pre, vec![]), Err(Error::NoFinetunedModels)));
    }

    #[test]
    fn report_is_capped_at_ten() {
        let dir = tempfile::tempdir().unwrap();
        let pre = manifest_with(
            dir.path(),
            "pre",
            (0..15).map(|i| (Box::leak(format!("k{i:02}").into_boxed_str()) as &str, t(&[1], 0.0))).collect(),
        );
        let other = manifest_with(dir.path(), "other", vec![("z", t(&[1], 0.0))]);
        let r = compare_manifests(&pre, &[other]);
        assert_eq!(r.mismatches.len(), 10);
        assert_eq!(r.total, 16);
    }

    #[test]
    fn groups_stream_in_key_order() {
        let dir = tempfile::tempdir().unwrap();
        let tensors = |off: f32| vec![("b", t(&[2], off)), ("a", t(&[3], off)), ("c.w", t(&[1], off))];
        let pre = manifest_with(dir.path(), "pre", tensors(0.0));
        let f1 = manifest_with(dir.path(), "f1", tensors(1.0));
        let f2 = manifest_with(dir.path(), "f2", tensors(2.0));
        let set = validate_set(pre, vec![f1, f2]).unwrap();
        let groups: Vec<ParamGroup> = stream_groups(&set).collect::<Result<_>>().unwrap();
        let keys: Vec<&str> = groups.iter().map(|g| g.key.as_str()).collect();
        assert_eq!(keys, ["a", "b", "c.w"]);
        assert_eq!(groups[1].finetuned[1], t(&[2], 2.0));
        assert_eq!(groups[0].pretrained, t(&[3], 0.0));
    }

    #[test]
    fn stream_aborts_with_key_on_io_failure() {
        let dir = tempfile::tempdir().unwrap();
        let tensors = vec![("a", t(&[2], 0.0)), ("b", t(&[2], 0.0))];
        let pre = manifest_with(dir.path(), "pre", tensors.clone());
        let f1 = manifest_with(dir.path(), "f1", tensors);
        let set = validate_set(pre, vec![f1]).unwrap();
        // Truncate the finetuned file after opening the manifest.
        let shard = dir.path().join("f1").join(SINGLE_FILE_NAME);
        let len = fs::metadata(&shard).unwrap().len();
        let file = fs::OpenOptions::new().write(true).open(&shard).unwrap();
        file.set_len(len - 4).unwrap();
        let results: Vec<_> = stream_groups(&set).collect();
        assert_eq!(results.len(), 2);
        assert!(results[0].is_ok());
        assert!(matches!(&results[1], Err(Error::StreamRead { key, .. }) if key == "b"));
    }

    #[test]
    fn planned_writer_matches_spooled_writer() {
        let dir = tempfile::tempdir().unwrap();
        let tensors: Vec<(ParamKey, Tensor)> = (0..6)
            .map(|i| (ParamKey::new(format!("w{i}")), t(&[3 + i], i as f32)))
            .collect();
        let specs = tensors
            .iter()
            .map(|(k, v)| TensorSpec { key: k.clone(), shape: v.shape().to_vec(), dtype: v.dtype() })
            .collect();
        let mut w = PlannedWriter::create(dir.path().join("planned"), specs, 40).unwrap();
        for (k, v) in &tensors {
            w.write(k, v).unwrap();
        }
        w.finish().unwrap();
        write_checkpoint(tensors, dir.path().join("spooled"), 40).unwrap();
        let list = |d: &str| {
            let mut names: Vec<_> = fs::read_dir(dir.path().join(d))
                .unwrap()
                .map(|e| e.unwrap().file_name())
                .collect();
            names.sort();
            names
        };
        assert_eq!(list("planned"), list("spooled"));
        for name in list("planned") {
            assert_eq!(
                fs::read(dir.path().join("planned").join(&name)).unwrap(),
                fs::read(dir.path().join("spooled").join(&name)).unwrap(),
                "{name:?}"
            );
        }
    }

    #[test]
    fn planned_writer_rejects_out_of_order_keys() {
        let dir = tempfile::tempdir().unwrap();
        let specs = vec![
            TensorSpec { key: "a".into(), shape: vec![1], dtype: DType::F32 },
            TensorSpec { key: "b".into(), shape: vec![1], dtype: DType::F32 },
        ];
        let mut w = PlannedWriter::create(dir.path(), specs, u64::MAX).unwrap();
        assert!(matches!(
            w.write(&"b".into(), &t(&[1], 0.0)),
            Err(Error::UnexpectedKey { .. })
        ));
    }

    #[test]
    fn auxiliary_files_are_copied() {
        let dir = tempfile::tempdir().unwrap();
        let pre = dir.path().join("pre");
        write_checkpoint(vec![(ParamKey::from("a"), t(&[1], 0.0))], &pre, u64::MAX).unwrap();
        fs::write(pre.join("config.json"), "{}").unwrap();
        fs::write(pre.join("tokenizer.json"), "tok").unwrap();
        let out = dir.path().join("out");
        fs::create_dir_all(&out).unwrap();
        let copied = copy_auxiliary_files(&pre, &out).unwrap();
        assert_eq!(copied.len(), 2);
        assert_eq!(fs::read_to_string(out.join("tokenizer.json")).unwrap(), "tok");
        assert!(!out.join(SINGLE_FILE_NAME).exists());
    }

    #[test]
    fn fingerprint_depends_on_keys_and_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let a = manifest_with(dir.path(), "a", vec![("w", t(&[2, 3], 0.0))]);
        let b = manifest_with(dir.path(), "b", vec![("w", t(&[2, 3], 5.0))]);
        let c = manifest_with(dir.path(), "c", vec![("w", t(&[3, 2], 0.0))]);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a.fingerprint().len(), 16);
    }
}
