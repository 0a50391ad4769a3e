//! `.mmds` packed datasets.
//!
//! Same framing as the checkpoint container, with magic `MMDS`:
//!
//! ```text
//! "MMDS" | version u32 | header length u64 | header JSON | SHA-256(header)
//!        | payload length u64 | payload | SHA-256(payload)
//! ```
//!
//! The header holds `name`, `class_names`, `dtype`, `shape` (N, C, H, W)
//! and `splits` (name → sample indices). The payload is the image tensor in
//! little-endian row-major order followed by N labels as u32 LE.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::checkpoint::{frame, unframe};
use crate::error::{Error, Result};
use crate::tensor::{AnyTensor, DType};

const MAGIC: &[u8; 4] = b"MMDS";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    name: String,
    class_names: Vec<String>,
    dtype: DType,
    shape: [usize; 4],
    splits: BTreeMap<String, Vec<usize>>,
}

impl LabeledDataset {
    pub fn to_packed_bytes(&self) -> Result<Vec<u8>> {
        let shape: [usize; 4] = self
            .images
            .shape()
            .try_into()
            .map_err(|_| Error::Shape("dataset images must be rank 4".into()))?;
        let header = Header {
            name: self.name.clone(),
            class_names: self.class_names.clone(),
            dtype: self.images.dtype(),
            shape,
            splits: self.splits.clone(),
        };
        let header = serde_json::to_vec(&header)
            .map_err(|e| Error::InvalidArgument(format!("cannot encode dataset header: {e}")))?;
        let mut payload = self.images.to_le_bytes();
        for &l in &self.labels {
            let l = u32::try_from(l).map_err(|_| Error::InvalidArgument(format!("label {l} exceeds u32")))?;
            payload.extend_from_slice(&l.to_le_bytes());
        }
        Ok(frame(MAGIC, &header, &payload))
    }

    pub fn from_packed_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (header, payload) = unframe(MAGIC, bytes, path)?;
        let h: Header = serde_json::from_slice(header)
            .map_err(|e| Error::corrupt(path, format!("unreadable dataset header: {e}")))?;
        let n = h.shape[0];
        let image_bytes = h
            .shape
            .iter()
            .try_fold(h.dtype.size_in_bytes(), |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::corrupt(path, "overflowing image shape"))?;
        if payload.len() != image_bytes + 4 * n {
            return Err(Error::corrupt(
                path,
                format!(
                    "payload is {} bytes, header implies {}",
                    payload.len(),
                    image_bytes + 4 * n
                ),
            ));
        }
        let images = AnyTensor::from_le_bytes(h.dtype, &h.shape, &payload[..image_bytes])?;
        let labels = payload[image_bytes..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        LabeledDataset::new(h.name, h.class_names, images, labels, h.splits)
    }

    pub fn save_packed(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_packed_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load_packed(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_packed_bytes(&bytes, path)
    }
}

/// A split given either as explicit indices or as a half-open range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SplitSource {
    Range { start: usize, end: usize },
    Indices(Vec<usize>),
}

/// TOML manifest for `dataset pack`:
///
/// ```toml
/// name = "isic-subset"
/// class_names = ["nevus", "melanoma"]
/// dtype = "f32"              # element type of the raw image file
/// shape = [1000, 3, 32, 32]  # N, C, H, W
/// images = "images.bin"      # raw little-endian, row-major
/// labels = "labels.bin"      # N × u32 LE
///
/// [splits]
/// train = { start = 0, end = 800 }
/// val = [800, 801, 802]
/// ```
///
/// Relative file paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackManifest {
    pub name: String,
    pub class_names: Vec<String>,
    pub dtype: DType,
    pub shape: [usize; 4],
    pub images: PathBuf,
    pub labels: PathBuf,
    pub splits: BTreeMap<String, SplitSource>,
}

pub fn pack_from_manifest(manifest_path: &Path) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let m: PackManifest =
        toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", manifest_path.display())))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let read = |p: &Path| {
        let p = base.join(p);
        std::fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    let raw_images = read(&m.images)?;
    let expected: usize = m.shape.iter().product::<usize>() * m.dtype.size_in_bytes();
    if raw_images.len() != expected {
        return Err(Error::corrupt(
            base.join(&m.images),
            format!(
                "{} bytes, shape {:?} of {} needs {expected}",
                raw_images.len(),
                m.shape,
                m.dtype
            ),
        ));
    }
    let images = AnyTensor::from_le_bytes(m.dtype, &m.shape, &raw_images)?;
    let raw_labels = read(&m.labels)?;
    if raw_labels.len() != 4 * m.shape[0] {
        return Err(Error::corrupt(
            base.join(&m.labels),
            format!("{} bytes, expected {} u32 labels", raw_labels.len(), m.shape[0]),
        ));
    }
    let labels = raw_labels
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let splits = m
        .splits
        .into_iter()
        .map(|(k, v)| {
            let idx = match v {
                SplitSource::Range { start, end } => (start..end).collect(),
                SplitSource::Indices(i) => i,
            };
            (k, idx)
        })
        .collect();
    LabeledDataset::new(m.name, m.class_names, images, labels, splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn toy() -> LabeledDataset {
        let images = Tensor::<f64>::from_f64(&[3, 1, 1, 2], &[0., 1., 2., 3., 4., 5.]).unwrap();
        let splits = BTreeMap::from([("train".to_string(), vec![0, 2]), ("test".to_string(), vec![])]);
        LabeledDataset::new(
            "toy",
            vec!["a".into(), "b".into()],
            images.into(),
            vec![1, 0, 1],
            splits,
        )
        .unwrap()
    }

    #[test]
    fn packed_round_trip() {
        let ds = toy();
        let bytes = ds.to_packed_bytes().unwrap();
        assert_eq!(LabeledDataset::from_packed_bytes(&bytes, Path::new("mem")).unwrap(), ds);
    }

    #[test]
    fn out_of_range_split_index_is_an_error() {
        let mut ds = toy();
        ds.splits.insert("val".into(), vec![3]);
        let bytes = ds.to_packed_bytes().unwrap();
        assert!(matches!(
            LabeledDataset::from_packed_bytes(&bytes, Path::new("mem")),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn pack_manifest_with_ranges() {
        let dir = tempfile::tempdir().unwrap();
        let imgs: Vec<u8> = [0.5f32, 1.5, -2.0, 4.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        let labels: Vec<u8> = [0u32, 1, 1, 0].iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(dir.path().join("i.bin"), imgs).unwrap();
        std::fs::write(dir.path().join("l.bin"), labels).unwrap();
        let manifest = r#"
name = "raw"
class_names = ["x", "y"]
dtype = "f32"
shape = [4, 1, 1, 1]
images = "i.bin"
labels = "l.bin"

[splits]
train = { start = 0, end = 3 }
test = [3]
"#;
        let mpath = dir.path().join("m.toml");
        std::fs::write(&mpath, manifest).unwrap();
        let ds = pack_from_manifest(&mpath).unwrap();
        assert_eq!(ds.split("train").unwrap(), &[0, 1, 2]);
        assert_eq!(ds.images.to_f64_vec(), vec![0.5, 1.5, -2.0, 4.0]);
        assert_eq!(ds.labels, vec![0, 1, 1, 0]);
        std::fs::write(dir.path().join("l.bin"), [0u8; 5]).unwrap();
        assert!(pack_from_manifest(&mpath).is_err());
    }
}
