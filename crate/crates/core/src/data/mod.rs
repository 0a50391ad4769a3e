//! Labeled image datasets with named splits.

mod packed;
pub mod synth;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{AnyTensor, Scalar, Tensor};

pub use packed::{pack_from_manifest, PackManifest, SplitSource};
pub use synth::{generate_synth, Family, SplitSizes, SynthTaskSpec};

pub const TRAIN: &str = "train";
pub const VAL: &str = "val";
pub const TEST: &str = "test";

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub class_names: Vec<String>,
    /// N×C×H×W.
    pub images: AnyTensor,
    pub labels: Vec<usize>,
    pub splits: BTreeMap<String, Vec<usize>>,
}

impl LabeledDataset {
    /// Checks shapes, label range, split bounds and split disjointness.
    pub fn new(
        name: impl Into<String>,
        class_names: Vec<String>,
        images: AnyTensor,
        labels: Vec<usize>,
        splits: BTreeMap<String, Vec<usize>>,
    ) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            class_names,
            images,
            labels,
            splits,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = match *self.images.shape() {
            [n, _, _, _] => n,
            ref s => return Err(Error::Shape(format!("dataset images must be N×C×H×W, got {s:?}"))),
        };
        if self.labels.len() != n {
            return Err(Error::Shape(format!("{} labels for {n} images", self.labels.len())));
        }
        let k = self.class_count();
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let mut owner: Vec<Option<&str>> = vec![None; n];
        for (split, idx) in &self.splits {
            for &i in idx {
                let slot = owner.get_mut(i).ok_or_else(|| {
                    Error::InvalidArgument(format!("split `{split}` index {i} out of range for {n} samples"))
                })?;
                if let Some(other) = slot {
                    return Err(Error::InvalidArgument(format!(
                        "sample {i} appears in both `{other}` and `{split}`"
                    )));
                }
                *slot = Some(split);
            }
        }
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Channels, height, width of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn split(&self, name: &str) -> Result<&[usize]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownSplit(name.to_string()))
    }

    pub fn histogram(&self, split: &str) -> Result<Vec<usize>> {
        let mut h = vec![0; self.class_count()];
        for &i in self.split(split)? {
            h[self.labels[i]] += 1;
        }
        Ok(h)
    }

    /// Images and labels of a split, in split order.
    pub fn split_tensors<T: Scalar>(&self, split: &str) -> Result<(Tensor<T>, Vec<usize>)> {
        let idx = self.split(split)?;
        let images = self.images.to::<T>().gather_rows(idx)?;
        Ok((images, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Minibatches of one epoch. With `shuffle`, the order is a permutation
    /// drawn from `(seed, epoch)`; otherwise split order. The last batch may
    /// be short.
    pub fn batches<T: Scalar>(
        &self,
        split: &str,
        batch_size: usize,
        seed: u64,
        epoch: u64,
        shuffle: bool,
    ) -> Result<BatchIter<T>> {
        let order = batch_order(self.split(split)?, batch_size, seed, epoch, shuffle)?;
        Ok(BatchIter {
            images: self.images.to::<T>(),
            labels: self.labels.clone(),
            order: order.into_iter(),
        })
    }
}

/// Dataset indices grouped into batches for one epoch.
pub fn batch_order(
    split: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: u64,
    shuffle: bool,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut idx = split.to_vec();
    if shuffle {
        idx.shuffle(&mut stream_rng(seed, Stream::Shuffle, epoch));
    }
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub struct BatchIter<T> {
    images: Tensor<T>,
    labels: Vec<usize>,
    order: std::vec::IntoIter<Vec<usize>>,
}

impl<T: Scalar> Iterator for BatchIter<T> {
    type Item = (Tensor<T>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        let idx = self.order.next()?;
        let x = self
            .images
            .gather_rows(&idx)
            .expect("indices validated with the dataset");
        Some((x, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// Free-function form of [`LabeledDataset::batches`].
pub fn batch_iter<T: Scalar>(
    ds: &LabeledDataset,
    split: &str,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    shuffle: bool,
) -> Result<BatchIter<T>> {
    ds.batches(split, batch_size, seed, epoch, shuffle)
}
