//! Seeded synthetic classification tasks on small grayscale images.
//!
//! Three families share one image generator:
//!
//! * `frequency`: square-wave stripes; classes are orientation (horizontal,
//!   vertical) × period (2, 4 pixels), phase random.
//! * `blob`: one 16-pixel shape at a random position; classes are a 4×4
//!   block, a 5×5 ring, four 2×2 dots spread over 6×6, two 4×2 bars.
//! * `mixed`: stripes of random period plus a block or dots blob; classes
//!   are stripe orientation × blob shape, so a classifier needs both kinds
//!   of feature.
//!
//! All arithmetic is on integers in units of 1/256; noise is a centred sum
//! of twelve uniform integers (variance-matched to a unit normal) scaled by
//! `noise_std` and rounded to the same grid. Generation is therefore
//! byte-identical across platforms.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, TEST, TRAIN, VAL};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{DType, Tensor};

const UNIT: i64 = 256;
const STRIPE_LEVEL: i64 = 128;
const BLOB_LEVEL: i64 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Frequency,
    Blob,
    Mixed,
}

impl Family {
    pub fn class_names(self) -> [&'static str; 4] {
        match self {
            Family::Frequency => ["h-p2", "h-p4", "v-p2", "v-p4"],
            Family::Blob => ["block", "ring", "dots", "bars"],
            Family::Mixed => ["h-block", "h-dots", "v-block", "v-dots"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthTaskSpec {
    pub family: Family,
    /// Side length of the square single-channel images.
    #[serde(default = "default_size")]
    pub image_size: usize,
    #[serde(default = "default_classes")]
    pub class_count: usize,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    pub samples: SplitSizes,
    /// Relative class frequencies; empty means balanced.
    #[serde(default)]
    pub class_weights: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dtype")]
    pub dtype: DType,
}

fn default_size() -> usize {
    16
}
fn default_classes() -> usize {
    4
}
fn default_noise() -> f64 {
    0.2
}
fn default_dtype() -> DType {
    DType::F32
}

impl SynthTaskSpec {
    pub fn new(family: Family, samples: SplitSizes, seed: u64) -> Self {
        Self {
            family,
            image_size: default_size(),
            class_count: default_classes(),
            noise_std: default_noise(),
            samples,
            class_weights: Vec::new(),
            seed,
            dtype: default_dtype(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.image_size < 8 {
            return bad(format!("image size {} is below the minimum of 8", self.image_size));
        }
        if self.class_count != 4 {
            return bad(format!("synthetic families have 4 classes, not {}", self.class_count));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be finite and non-negative", self.noise_std));
        }
        if !self.class_weights.is_empty()
            && (self.class_weights.len() != self.class_count
                || self.class_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite()))
                || self.class_weights.iter().sum::<f64>() <= 0.0)
        {
            return bad(format!("class weights {:?} are invalid", self.class_weights));
        }
        Ok(())
    }

    /// Exact per-class sample counts for a split of `n`, apportioned by
    /// largest remainder (ties to the lower class index).
    pub fn class_counts(&self, n: usize) -> Vec<usize> {
        let weights = if self.class_weights.is_empty() {
            vec![1.0; self.class_count]
        } else {
            self.class_weights.clone()
        };
        let total: f64 = weights.iter().sum();
        let quotas: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
        let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let mut order: Vec<usize> = (0..counts.len()).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let missing = n - counts.iter().sum::<usize>();
        for &c in order.iter().take(missing) {
            counts[c] += 1;
        }
        counts
    }
}

#[derive(Clone, Copy)]
enum Shape {
    Block,
    Ring,
    Dots,
    Bars,
}

impl Shape {
    /// Pixel offsets relative to the top-left corner, and bounding box.
    fn pixels(self) -> (Vec<(usize, usize)>, usize, usize) {
        let mut px = Vec::with_capacity(16);
        let (h, w) = match self {
            Shape::Block => {
                for y in 0..4 {
                    for x in 0..4 {
                        px.push((y, x));
                    }
                }
                (4, 4)
            }
            Shape::Ring => {
                for y in 0..5 {
                    for x in 0..5 {
                        if y == 0 || y == 4 || x == 0 || x == 4 {
                            px.push((y, x));
                        }
                    }
                }
                (5, 5)
            }
            Shape::Dots => {
                for (oy, ox) in [(0, 0), (0, 4), (4, 0), (4, 4)] {
                    for y in 0..2 {
                        for x in 0..2 {
                            px.push((oy + y, ox + x));
                        }
                    }
                }
                (6, 6)
            }
            Shape::Bars => {
                for ox in [0, 4] {
                    for y in 0..4 {
                        for x in 0..2 {
                            px.push((y, ox + x));
                        }
                    }
                }
                (4, 6)
            }
        };
        (px, h, w)
    }
}

struct Canvas {
    size: usize,
    units: Vec<i64>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Self {
            size,
            units: vec![0; size * size],
        }
    }

    fn stripes(&mut self, horizontal: bool, period: usize, phase: usize) {
        let half = period / 2;
        for y in 0..self.size {
            for x in 0..self.size {
                let coord = if horizontal { y } else { x };
                if ((coord + phase) / half).is_multiple_of(2) {
                    self.units[y * self.size + x] += STRIPE_LEVEL;
                }
            }
        }
    }

    fn blob(&mut self, shape: Shape, rng: &mut ChaCha8Rng) {
        let (px, h, w) = shape.pixels();
        let top = rng.gen_range(0..=self.size - h);
        let left = rng.gen_range(0..=self.size - w);
        for (y, x) in px {
            self.units[(top + y) * self.size + left + x] += BLOB_LEVEL;
        }
    }

    fn noise(&mut self, std: f64, rng: &mut ChaCha8Rng) {
        if std == 0.0 {
            return;
        }
        for u in &mut self.units {
            let s: i64 = (0..12).map(|_| rng.gen_range(0..4096i64)).sum();
            let z = (s - 12 * 4095 / 2) as f64 / 4096.0;
            *u += (std * UNIT as f64 * z).round() as i64;
        }
    }
}

fn draw_image(family: Family, class: usize, size: usize, noise: f64, rng: &mut ChaCha8Rng) -> Vec<i64> {
    let mut c = Canvas::new(size);
    match family {
        Family::Frequency => {
            let period = [2, 4][class % 2];
            c.stripes(class < 2, period, rng.gen_range(0..period));
        }
        Family::Blob => {
            c.blob([Shape::Block, Shape::Ring, Shape::Dots, Shape::Bars][class], rng);
        }
        Family::Mixed => {
            let period = [2, 4][rng.gen_range(0..2)];
            c.stripes(class < 2, period, rng.gen_range(0..period));
            c.blob([Shape::Block, Shape::Dots][class % 2], rng);
        }
    }
    c.noise(noise, rng);
    c.units
}

/// Builds train, val and test splits (stored in that order) with exactly
/// the class counts of [`SynthTaskSpec::class_counts`], in shuffled order.
pub fn generate_synth(spec: &SynthTaskSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let s = spec.image_size;
    let n = spec.samples.train + spec.samples.val + spec.samples.test;
    let mut values = Vec::with_capacity(n * s * s);
    let mut labels = Vec::with_capacity(n);
    let mut splits = BTreeMap::new();
    for (k, (name, size)) in [
        (TRAIN, spec.samples.train),
        (VAL, spec.samples.val),
        (TEST, spec.samples.test),
    ]
    .into_iter()
    .enumerate()
    {
        let mut rng = stream_rng(spec.seed, Stream::Synth, k as u64);
        let mut split_labels: Vec<usize> = spec
            .class_counts(size)
            .iter()
            .enumerate()
            .flat_map(|(c, &m)| std::iter::repeat_n(c, m))
            .collect();
        split_labels.shuffle(&mut rng);
        let start = labels.len();
        for &class in &split_labels {
            let img = draw_image(spec.family, class, s, spec.noise_std, &mut rng);
            values.extend(img.into_iter().map(|u| u as f64 / UNIT as f64));
        }
        labels.extend_from_slice(&split_labels);
        splits.insert(name.to_string(), (start..labels.len()).collect());
    }
    let shape = [n, 1, s, s];
    let images = match spec.dtype {
        DType::F32 => Tensor::<f32>::from_f64(&shape, &values)?.into(),
        DType::F64 => Tensor::<f64>::from_f64(&shape, &values)?.into(),
    };
    let name = format!("synth-{}", spec.family.class_names().join("|"));
    let class_names = spec.family.class_names().iter().map(|c| c.to_string()).collect();
    LabeledDataset::new(name, class_names, images, labels, splits)
}
