//! The safetensors container: an 8-byte little-endian header length, a UTF-8
//! JSON header mapping tensor names to `{dtype, shape, data_offsets}`, then
//! raw little-endian tensor bytes. Offsets in the header are relative to the
//! start of the data section.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::tensor::{numel, DType};

/// Largest header this reader accepts.
const MAX_HEADER_BYTES: u64 = 100 << 20;

/// Element types this crate can read from a safetensors file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    Float(DType),
    U8,
}

impl ElementType {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "U8" => Some(ElementType::U8),
            other => DType::from_safetensors(other).map(ElementType::Float),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ElementType::Float(d) => d.as_str(),
            ElementType::U8 => "U8",
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            ElementType::Float(d) => d.byte_width(),
            ElementType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeaderEntry {
    pub name: String,
    /// Raw dtype string from the header.
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Absolute byte offset of the tensor's first byte within the file.
    pub offset: u64,
    pub byte_len: u64,
}

impl HeaderEntry {
    pub fn element_type(&self) -> Option<ElementType> {
        ElementType::parse(&self.dtype)
    }
}

#[derive(Debug, Clone)]
pub struct FileHeader {
    pub path: PathBuf,
    pub entries: Vec<HeaderEntry>,
    pub metadata: BTreeMap<String, String>,
    pub file_len: u64,
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn as_usize_list(v: &Value) -> Option<Vec<usize>> {
    v.as_array()?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize))
        .collect()
}

/// Parses and bounds-checks a file's header without touching tensor data.
pub fn read_header(path: &Path) -> Result<FileHeader> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    if file_len < 8 {
        return Err(malformed(path, "file shorter than the 8-byte length prefix"));
    }
    let mut prefix = [0u8; 8];
    file.read_exact(&mut prefix).map_err(|e| Error::io(path, e))?;
    let header_len = u64::from_le_bytes(prefix);
    if header_len > file_len - 8 {
        return Err(malformed(
            path,
            format!("header length {header_len} exceeds file size {file_len}"),
        ));
    }
    if header_len > MAX_HEADER_BYTES {
        return Err(malformed(path, format!("header length {header_len} is too large")));
    }
    let mut raw = vec![0u8; header_len as usize];
    file.read_exact(&mut raw).map_err(|e| Error::io(path, e))?;
    let text = std::str::from_utf8(&raw).map_err(|_| malformed(path, "header is not UTF-8"))?;
    let json: Map<String, Value> =
        serde_json::from_str(text).map_err(|e| malformed(path, format!("bad JSON: {e}")))?;

    let data_start = 8 + header_len;
    let data_len = file_len - data_start;
    let mut metadata = BTreeMap::new();
    let mut entries = Vec::with_capacity(json.len());
    for (name, value) in json {
        if name == "__metadata__" {
            let obj = value
                .as_object()
                .ok_or_else(|| malformed(path, "__metadata__ is not an object"))?;
            for (k, v) in obj {
                let v = v
                    .as_str()
                    .ok_or_else(|| malformed(path, format!("metadata value for {k} is not a string")))?;
                metadata.insert(k.clone(), v.to_string());
            }
            continue;
        }
        let obj = value
            .as_object()
            .ok_or_else(|| malformed(path, format!("entry {name} is not an object")))?;
        let dtype = obj
            .get("dtype")
            .and_then(Value::as_str)
            .ok_or_else(|| malformed(path, format!("entry {name} has no dtype")))?
            .to_string();
        let shape = obj
            .get("shape")
            .and_then(as_usize_list)
            .ok_or_else(|| malformed(path, format!("entry {name} has no valid shape")))?;
        let offsets = obj
            .get("data_offsets")
            .and_then(as_usize_list)
            .filter(|o| o.len() == 2)
            .ok_or_else(|| malformed(path, format!("entry {name} has no valid data_offsets")))?;
        let (begin, end) = (offsets[0] as u64, offsets[1] as u64);
        if begin > end || end > data_len {
            return Err(malformed(
                path,
                format!("entry {name} range [{begin}, {end}) lies outside the {data_len}-byte data section"),
            ));
        }
        if let Some(et) = ElementType::parse(&dtype) {
            let expected = numel(&shape) as u64 * et.byte_width() as u64;
            if expected != end - begin {
                return Err(malformed(
                    path,
                    format!("entry {name} spans {} bytes but shape {shape:?} of {dtype} needs {expected}", end - begin),
                ));
            }
        }
        entries.push(HeaderEntry {
            name,
            dtype,
            shape,
            offset: data_start + begin,
            byte_len: end - begin,
        });
    }

    let mut by_offset: Vec<&HeaderEntry> = entries.iter().filter(|e| e.byte_len > 0).collect();
    by_offset.sort_by_key(|e| e.offset);
    for pair in by_offset.windows(2) {
        if pair[1].offset < pair[0].offset + pair[0].byte_len {
            return Err(Error::OverlappingRanges {
                path: path.to_path_buf(),
                key: pair[1].name.clone(),
            });
        }
    }

    Ok(FileHeader {
        path: path.to_path_buf(),
        entries,
        metadata,
        file_len,
    })
}

/// One tensor's slot in a header being written.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub dtype: &'static str,
    pub shape: Vec<usize>,
    pub byte_len: u64,
}

/// Serializes a header (length prefix included) for tensors laid out back to
/// back in `entries` order. JSON keys are sorted and the header is padded with
/// spaces to a multiple of 8 bytes.
pub fn encode_header(entries: &[LayoutEntry], metadata: &BTreeMap<String, String>) -> Vec<u8> {
    let mut json: BTreeMap<String, Value> = BTreeMap::new();
    if !metadata.is_empty() {
        let meta: Map<String, Value> = metadata
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        json.insert("__metadata__".into(), Value::Object(meta));
    }
    let mut cursor = 0u64;
    for e in entries {
        let mut obj = Map::new();
        obj.insert("dtype".into(), Value::String(e.dtype.into()));
        obj.insert("shape".into(), Value::from(e.shape.clone()));
        obj.insert(
            "data_offsets".into(),
            Value::from(vec![cursor, cursor + e.byte_len]),
        );
        cursor += e.byte_len;
        json.insert(e.name.clone(), Value::Object(obj));
    }
    let mut text = serde_json::to_string(&json).expect("header serializes");
    while text.len() % 8 != 0 {
        text.push(' ');
    }
    let mut out = Vec::with_capacity(8 + text.len());
    out.extend((text.len() as u64).to_le_bytes());
    out.extend(text.as_bytes());
    out
}

const READ_CHUNK: usize = 1 << 20;

/// Reads `byte_len` bytes at `offset` and decodes them as `dtype`, streaming
/// through a bounded buffer so only the decoded values stay resident.
pub(crate) fn read_f32_values(
    file: &mut File,
    offset: u64,
    byte_len: u64,
    dtype: DType,
) -> std::io::Result<Vec<f32>> {
    file.seek(SeekFrom::Start(offset))?;
    let count = byte_len as usize / dtype.byte_width();
    let mut values = Vec::with_capacity(count);
    let mut buf = vec![0u8; READ_CHUNK.min(byte_len as usize)];
    let mut remaining = byte_len as usize;
    while remaining > 0 {
        let take = remaining.min(buf.len());
        file.read_exact(&mut buf[..take])?;
        dtype.decode_into(&buf[..take], &mut values);
        remaining -= take;
    }
    Ok(values)
}

pub(crate) fn read_raw(file: &mut File, offset: u64, byte_len: u64) -> std::io::Result<Vec<u8>> {
    file.seek(SeekFrom::Start(offset))?;
    let mut out = vec![0u8; byte_len as usize];
    file.read_exact(&mut out)?;
    Ok(out)
}

/// Encodes `values` through a bounded buffer.
pub(crate) fn write_f32_values<W: Write>(
    out: &mut W,
    values: &[f32],
    dtype: DType,
) -> std::io::Result<()> {
    let step = READ_CHUNK / 4;
    let mut buf = Vec::with_capacity(step * dtype.byte_width());
    for chunk in values.chunks(step) {
        buf.clear();
        dtype.encode_into(chunk, &mut buf);
        out.write_all(&buf)?;
    }
    Ok(())
}
