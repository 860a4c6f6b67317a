//! On-disk container for dense weight tensors.
//!
//! Layout of an "SDTC" file, in order:
//!
//! * magic `b"SDTC"` (4 bytes)
//! * little-endian u32 manifest byte length
//! * manifest as UTF-8 JSON (version, tensor index, per-layer metadata)
//! * raw little-endian f32 payload blob
//!
//! The manifest carries no floating-point payload data; every numeric value
//! lives in the blob, so manifest parsing never loses precision. Saving is
//! deterministic: the same tensors always produce the same bytes.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const SDTC_MAGIC: &[u8; 4] = b"SDTC";
pub const FORMAT_VERSION: u32 = 1;

/// Tensor layout kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TensorKind {
    #[serde(rename = "dense2d")]
    Dense2d,
    #[serde(rename = "conv4d")]
    Conv4d,
}

/// A named dense real-valued tensor, row-major, 32-bit IEEE-754 elements.
///
/// dense2d shape is `[M, C]`; conv4d shape is `[M, C, R, S]` with `R = S`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl WeightTensor {
    pub fn new(
        name: impl Into<String>,
        kind: TensorKind,
        shape: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<Self, IoError> {
        let name = name.into();
        let expected_rank = match kind {
            TensorKind::Dense2d => 2,
            TensorKind::Conv4d => 4,
        };
        if shape.len() != expected_rank {
            return Err(IoError::Validation(format!(
                "tensor '{name}': {kind:?} requires rank {expected_rank}, got shape {shape:?}"
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(IoError::Validation(format!(
                "tensor '{name}': zero-sized dimension in {shape:?}"
            )));
        }
        if kind == TensorKind::Conv4d && shape[2] != shape[3] {
            return Err(IoError::Validation(format!(
                "tensor '{name}': kernels must be square, got R={} S={}",
                shape[2], shape[3]
            )));
        }
        let count: usize = shape.iter().product();
        if data.len() != count {
            return Err(IoError::Validation(format!(
                "tensor '{name}': data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(IoError::Validation(format!("tensor '{name}': non-finite element")));
        }
        Ok(WeightTensor { name, kind, shape, data })
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Optional per-layer sidecar data carried in the manifest.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerMeta {
    /// Batch-norm channel scaling factors, one per output channel, used by
    /// channel pruning. Accepted as input; never learned here.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channel_scales: Option<Vec<f32>>,
    /// Free-form per-layer decomposition config override.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    kind: TensorKind,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    tensors: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    layer_meta: BTreeMap<String, LayerMeta>,
}

/// A loaded or to-be-saved tensor container: tensors in manifest order plus
/// per-layer metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub tensors: Vec<WeightTensor>,
    pub layer_meta: BTreeMap<String, LayerMeta>,
}

impl Container {
    pub fn new(tensors: Vec<WeightTensor>) -> Self {
        Container { tensors, layer_meta: BTreeMap::new() }
    }

    pub fn tensor(&self, name: &str) -> Option<&WeightTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Load an SDTC container. Tensors come back in manifest order; a round
/// trip through [`save_container`] is byte-identical.
pub fn load_container(path: impl AsRef<Path>) -> Result<Container, IoError> {
    let bytes = fs::read(path.as_ref())?;
    let (manifest_bytes, blob) = read_envelope(&bytes, SDTC_MAGIC)?;
    let manifest: Manifest = serde_json::from_slice(manifest_bytes)
        .map_err(|e| IoError::Format(format!("manifest does not parse: {e}")))?;
    if manifest.version != FORMAT_VERSION {
        return Err(IoError::Format(format!("unsupported format version {}", manifest.version)));
    }

    let mut names = HashSet::new();
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    let mut cursor = 0u64;
    for entry in &manifest.tensors {
        if !names.insert(entry.name.clone()) {
            return Err(IoError::Validation(format!("duplicate tensor name '{}'", entry.name)));
        }
        if entry.offset != cursor {
            return Err(IoError::Corrupt(format!(
                "tensor '{}': offset {} overlaps or leaves a gap (expected {})",
                entry.name, entry.offset, cursor
            )));
        }
        let end = entry
            .offset
            .checked_add(entry.length)
            .ok_or_else(|| IoError::Corrupt(format!("tensor '{}': offset overflow", entry.name)))?;
        if end > blob.len() as u64 {
            return Err(IoError::Corrupt(format!(
                "tensor '{}': extends past blob end ({} > {})",
                entry.name,
                end,
                blob.len()
            )));
        }
        let expected: usize = entry.shape.iter().product::<usize>() * 4;
        if entry.length as usize != expected {
            return Err(IoError::Corrupt(format!(
                "tensor '{}': byte length {} does not match shape {:?}",
                entry.name, entry.length, entry.shape
            )));
        }
        let raw = &blob[entry.offset as usize..end as usize];
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(WeightTensor::new(entry.name.clone(), entry.kind, entry.shape.clone(), data)?);
        cursor = end;
    }
    if cursor != blob.len() as u64 {
        return Err(IoError::Corrupt(format!(
            "blob length {} does not match manifest total {}",
            blob.len(),
            cursor
        )));
    }
    Ok(Container { tensors, layer_meta: manifest.layer_meta })
}

/// Save an SDTC container. Deterministic: identical input always yields
/// identical bytes.
pub fn save_container(container: &Container, path: impl AsRef<Path>) -> Result<(), IoError> {
    let bytes = container_bytes(container)?;
    fs::write(path.as_ref(), bytes)?;
    Ok(())
}

/// Serialize a container to its exact file bytes.
pub fn container_bytes(container: &Container) -> Result<Vec<u8>, IoError> {
    let mut names = HashSet::new();
    for t in &container.tensors {
        // Re-run the invariants; tensors may have been constructed long ago.
        WeightTensor::new(t.name.clone(), t.kind, t.shape.clone(), t.data.clone())?;
        if !names.insert(t.name.as_str()) {
            return Err(IoError::Validation(format!("duplicate tensor name '{}'", t.name)));
        }
    }
    let mut entries = Vec::with_capacity(container.tensors.len());
    let mut blob = Vec::new();
    for t in &container.tensors {
        let offset = blob.len() as u64;
        for v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ManifestEntry {
            name: t.name.clone(),
            kind: t.kind,
            shape: t.shape.clone(),
            offset,
            length: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        tensors: entries,
        layer_meta: container.layer_meta.clone(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| IoError::Format(format!("manifest serialization failed: {e}")))?;
    Ok(write_envelope(SDTC_MAGIC, &manifest_bytes, &blob))
}

/// Assemble `magic | manifest length (LE u32) | manifest | blob`.
pub fn write_envelope(magic: &[u8; 4], manifest: &[u8], blob: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + manifest.len() + blob.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest);
    out.extend_from_slice(blob);
    out
}

/// Split file bytes back into manifest and blob, checking the magic.
pub fn read_envelope<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<(&'a [u8], &'a [u8]), IoError> {
    if bytes.len() < 8 || &bytes[0..4] != magic {
        return Err(IoError::Format(format!(
            "bad magic: expected {:?}",
            std::str::from_utf8(magic).unwrap_or("?")
        )));
    }
    let len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    if 8 + len > bytes.len() {
        return Err(IoError::Corrupt("manifest length exceeds file size".into()));
    }
    Ok((&bytes[8..8 + len], &bytes[8 + len..]))
}

/// Errors from container loading, saving and validation.
#[derive(Debug)]
pub enum IoError {
    /// Unrecognized or malformed file structure (bad magic, bad manifest).
    Format(String),
    /// Structurally valid file with inconsistent contents.
    Corrupt(String),
    /// Domain invariant violation (NaN payload, duplicate name, bad shape).
    Validation(String),
    Io(io::Error),
}

impl fmt::Display for IoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IoError::Format(m) => write!(f, "format error: {m}"),
            IoError::Corrupt(m) => write!(f, "corruption error: {m}"),
            IoError::Validation(m) => write!(f, "validation error: {m}"),
            IoError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for IoError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            IoError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for IoError {
    fn from(e: io::Error) -> Self {
        IoError::Io(e)
    }
}
