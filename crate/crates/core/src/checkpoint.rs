//! `.mmck` tensor container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MMCK"
//! 4       4     format version (u32 LE), currently 1
//! 8       8     header length H (u64 LE)
//! 16      H     header: UTF-8 JSON {"meta": …, "tensors": [index entries]}
//! 16+H    32    SHA-256 of the header bytes
//! 48+H    8     payload length P (u64 LE)
//! 56+H    P     payload: tensors back to back, little-endian, row-major
//! 56+H+P  32    SHA-256 of the payload bytes
//! ```
//!
//! Each index entry is `{"name", "dtype", "shape", "offset"}` with the
//! offset relative to the payload start; entries are sorted by name and tile
//! the payload exactly. For checkpoints `meta` is a [`Manifest`]; activation
//! dumps use the same container with free-form metadata.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamTree;
use crate::tensor::{AnyTensor, DType};
use crate::zoo::ModelSpec;

pub const MAGIC: &[u8; 4] = b"MMCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrained,
    Lp,
    Baked,
    Finetuned,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrained => "pretrained",
            Stage::Lp => "lp",
            Stage::Baked => "baked",
            Stage::Finetuned => "finetuned",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub spec_digest: String,
    pub spec: ModelSpec,
    pub source_task: String,
    pub seed: u64,
    pub stage: Stage,
}

impl Manifest {
    pub fn new(spec: &ModelSpec, source_task: impl Into<String>, seed: u64, stage: Stage) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            spec_digest: spec.backbone_digest(),
            spec: spec.clone(),
            source_task: source_task.into(),
            seed,
            stage,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tree: ParamTree,
}

impl Checkpoint {
    pub fn new(tree: ParamTree, manifest: Manifest) -> Self {
        Self { manifest, tree }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.manifest.spec
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save(&self.tree, &self.manifest, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load(path)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header<M> {
    meta: M,
    tensors: Vec<IndexEntry>,
}

fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// Serializes `tree` with arbitrary metadata into container bytes.
pub fn encode<M: Serialize>(meta: &M, tree: &ParamTree) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(tree.len());
    for (name, t) in tree.iter() {
        tensors.push(IndexEntry {
            name: name.to_string(),
            dtype: t.dtype(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        payload.extend_from_slice(&t.to_le_bytes());
    }
    let header = serde_json::to_vec(&Header { meta, tensors })
        .map_err(|e| Error::InvalidArgument(format!("cannot encode header: {e}")))?;
    Ok(frame(MAGIC, &header, &payload))
}

/// Wraps a header and payload in the shared container layout.
pub(crate) fn frame(magic: &[u8; 4], header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(header.len() + payload.len() + 88);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(&sha256(header));
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&sha256(payload));
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::corrupt(self.path, format!("truncated while reading {what}")));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Checks magic, version, lengths and both checksums; returns the header
/// and payload slices.
pub(crate) fn unframe<'a>(magic: &[u8; 4], bytes: &'a [u8], path: &'a Path) -> Result<(&'a [u8], &'a [u8])> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != magic {
        return Err(Error::corrupt(path, "bad magic"));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.into(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = r.u64("header length")? as usize;
    let header = r.take(header_len, "header")?;
    if r.take(32, "header checksum")? != sha256(header) {
        return Err(Error::corrupt(path, "header checksum mismatch"));
    }
    let payload_len = r.u64("payload length")? as usize;
    let payload = r.take(payload_len, "payload")?;
    if r.take(32, "payload checksum")? != sha256(payload) {
        return Err(Error::corrupt(path, "payload checksum mismatch"));
    }
    if r.pos != bytes.len() {
        return Err(Error::corrupt(path, "trailing bytes after payload checksum"));
    }
    Ok((header, payload))
}

/// Parses container bytes; `path` is only used in error messages.
pub fn decode<M: for<'de> Deserialize<'de>>(bytes: &[u8], path: &Path) -> Result<(M, ParamTree)> {
    let (header, payload) = unframe(MAGIC, bytes, path)?;
    let header: Header<M> =
        serde_json::from_slice(header).map_err(|e| Error::corrupt(path, format!("unreadable header: {e}")))?;
    let mut tree = ParamTree::new();
    let mut expected_offset = 0usize;
    for e in &header.tensors {
        let len = e
            .shape
            .iter()
            .try_fold(e.dtype.size_in_bytes(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::corrupt(path, format!("`{}` has an overflowing shape", e.name)))?;
        if e.offset as usize != expected_offset || expected_offset + len > payload.len() {
            return Err(Error::corrupt(
                path,
                format!("`{}` at offset {} does not tile the payload", e.name, e.offset),
            ));
        }
        if tree.contains(&e.name) {
            return Err(Error::corrupt(path, format!("duplicate tensor `{}`", e.name)));
        }
        let t = AnyTensor::from_le_bytes(e.dtype, &e.shape, &payload[expected_offset..expected_offset + len])?;
        tree.insert(e.name.clone(), t);
        expected_offset += len;
    }
    if expected_offset != payload.len() {
        return Err(Error::corrupt(path, "payload has bytes no tensor claims"));
    }
    Ok((header.meta, tree))
}

pub fn save(tree: &ParamTree, manifest: &Manifest, path: &Path) -> Result<()> {
    let bytes = encode(manifest, tree)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads and validates a checkpoint: container integrity, format version and
/// the manifest's digest against its embedded spec.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (manifest, tree): (Manifest, ParamTree) = decode(&bytes, path)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.into(),
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let digest = manifest.spec.backbone_digest();
    if digest != manifest.spec_digest {
        return Err(Error::corrupt(path, "manifest digest does not match its embedded spec"));
    }
    Ok(Checkpoint { manifest, tree })
}

/// [`load`], additionally requiring the checkpoint's backbone to match `spec`.
pub fn load_expecting(path: &Path, spec: &ModelSpec) -> Result<Checkpoint> {
    let ck = load(path)?;
    let expected = spec.backbone_digest();
    if ck.manifest.spec_digest != expected {
        return Err(Error::IncompatibleSpec {
            path: path.into(),
            found: ck.manifest.spec_digest,
            expected,
        });
    }
    Ok(ck)
}

/// Writes a bare tensor collection (e.g. activation dumps) in the same
/// container with free-form metadata.
pub fn save_tensors(tree: &ParamTree, meta: &serde_json::Value, path: &Path) -> Result<()> {
    let bytes = encode(meta, tree)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_tensors(path: &Path) -> Result<(serde_json::Value, ParamTree)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
