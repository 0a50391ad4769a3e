//! Declarative architectures, seeded model construction and checkpoint
//! congruence checks.
//!
//! A [`ModelSpec`] is a sequence of convolutional blocks followed by a
//! flatten and a single fully-connected head. Each block is
//! `conv → [batch norm] → [+ input] → activation → [max pool]`.
//!
//! Specs are stored as TOML:
//!
//! ```toml
//! name = "smallnet"
//! input_shape = [1, 16, 16]   # channels, height, width
//! classes = 4
//!
//! [[blocks]]
//! out_channels = 8
//! kernel_size = 3
//! stride = 1          # default 1
//! padding = 1         # default kernel_size / 2
//! use_bn = true       # default true
//! activation = "relu" # "relu" | "none", default "relu"
//! residual = false    # default false
//! pool = 2            # optional max-pool window
//! bias = false        # optional conv bias, default false
//! ```

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Activation, Network};
use crate::params::{names, ParamTree};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Scalar, Tensor};

fn default_stride() -> usize {
    1
}

fn default_true() -> bool {
    true
}

fn default_activation() -> Activation {
    Activation::Relu
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub out_channels: usize,
    pub kernel_size: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default = "default_true")]
    pub use_bn: bool,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub residual: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<usize>,
    #[serde(default)]
    pub bias: bool,
}

impl BlockSpec {
    pub fn conv_bn_relu(out_channels: usize, kernel_size: usize) -> Self {
        Self {
            out_channels,
            kernel_size,
            stride: 1,
            padding: None,
            use_bn: true,
            activation: Activation::Relu,
            residual: false,
            pool: None,
            bias: false,
        }
    }

    pub fn with_pool(mut self, window: usize) -> Self {
        self.pool = Some(window);
        self
    }

    pub fn padding(&self) -> usize {
        self.padding.unwrap_or(self.kernel_size / 2)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    /// Channels, height, width.
    pub input_shape: [usize; 3],
    pub classes: usize,
    #[serde(default)]
    pub blocks: Vec<BlockSpec>,
}

/// Shapes flowing through one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockShapes {
    pub input: [usize; 3],
    pub conv_output: [usize; 3],
    pub output: [usize; 3],
}

/// One convolutional kernel: an output channel of a backbone conv layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KernelAddress {
    pub layer: usize,
    pub channel: usize,
}

impl fmt::Display for KernelAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.layer, self.channel)
    }
}

impl ModelSpec {
    /// Three conv-BN-ReLU blocks of 8, 16 and 32 channels (3×3, stride 1),
    /// each followed by 2×2 max pooling, on 1×16×16 inputs.
    pub fn smallnet(classes: usize) -> Self {
        Self {
            name: "smallnet".into(),
            input_shape: [1, 16, 16],
            classes,
            blocks: [8, 16, 32]
                .into_iter()
                .map(|c| BlockSpec::conv_bn_relu(c, 3).with_pool(2))
                .collect(),
        }
    }

    /// The first `blocks` blocks of smallnet.
    pub fn smallnet_prefix(blocks: usize, classes: usize) -> Self {
        let mut spec = Self::smallnet(classes);
        spec.blocks.truncate(blocks);
        spec.name = format!("smallnet{blocks}");
        spec
    }

    pub fn with_classes(&self, classes: usize) -> Self {
        Self {
            classes,
            ..self.clone()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: ModelSpec = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("model specs always serialize")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    /// Walks the blocks, checking every structural constraint.
    pub fn block_shapes(&self) -> Result<Vec<BlockShapes>> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.input_shape.contains(&0) {
            return bad(format!("input shape {:?} has a zero extent", self.input_shape));
        }
        if self.classes == 0 {
            return bad("head needs at least one class".into());
        }
        let mut shape = self.input_shape;
        let mut out = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 || b.kernel_size == 0 || b.stride == 0 {
                return bad(format!("block {i}: channels, kernel size and stride must be positive"));
            }
            let [_, h, w] = shape;
            let p = b.padding();
            let extent = |e: usize| (e + 2 * p >= b.kernel_size).then(|| (e + 2 * p - b.kernel_size) / b.stride + 1);
            let (Some(oh), Some(ow)) = (extent(h), extent(w)) else {
                return bad(format!("block {i}: kernel {} does not fit {h}×{w}", b.kernel_size));
            };
            let conv_output = [b.out_channels, oh, ow];
            if b.residual && conv_output != shape {
                return bad(format!(
                    "block {i}: residual skip needs matching shapes, got {shape:?} → {conv_output:?}"
                ));
            }
            let mut output = conv_output;
            if let Some(k) = b.pool {
                if k == 0 || oh < k || ow < k {
                    return bad(format!("block {i}: pool window {k:?} does not fit {oh}×{ow}"));
                }
                output = [b.out_channels, oh / k, ow / k];
            }
            out.push(BlockShapes {
                input: shape,
                conv_output,
                output,
            });
            shape = output;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.block_shapes().map(|_| ())
    }

    pub fn feature_dim(&self) -> Result<usize> {
        let shapes = self.block_shapes()?;
        let last = shapes.last().map_or(self.input_shape, |s| s.output);
        Ok(last.iter().product())
    }

    pub fn kernel_count(&self) -> usize {
        self.blocks.iter().map(|b| b.out_channels).sum()
    }

    /// Learnable scalars (conv weights and biases, BN affine, head); running
    /// statistics excluded.
    pub fn parameter_count(&self) -> Result<usize> {
        let shapes = self.block_shapes()?;
        let backbone: usize = self
            .blocks
            .iter()
            .zip(&shapes)
            .map(|(b, s)| {
                let cin = s.input[0];
                b.out_channels * cin * b.kernel_size * b.kernel_size
                    + if b.bias { b.out_channels } else { 0 }
                    + if b.use_bn { 2 * b.out_channels } else { 0 }
            })
            .sum();
        Ok(backbone + self.feature_dim()? * self.classes + self.classes)
    }

    /// SHA-256 over the canonical backbone description. The name and the
    /// head class count are excluded: a source backbone stays compatible
    /// with any target head.
    pub fn backbone_digest(&self) -> String {
        #[derive(Serialize)]
        struct Canonical<'a> {
            input_shape: [usize; 3],
            blocks: Vec<CanonicalBlock<'a>>,
        }
        #[derive(Serialize)]
        struct CanonicalBlock<'a> {
            out_channels: usize,
            kernel_size: usize,
            stride: usize,
            padding: usize,
            use_bn: bool,
            activation: &'a Activation,
            residual: bool,
            pool: Option<usize>,
            bias: bool,
        }
        let canonical = Canonical {
            input_shape: self.input_shape,
            blocks: self
                .blocks
                .iter()
                .map(|b| CanonicalBlock {
                    out_channels: b.out_channels,
                    kernel_size: b.kernel_size,
                    stride: b.stride,
                    padding: b.padding(),
                    use_bn: b.use_bn,
                    activation: &b.activation,
                    residual: b.residual,
                    pool: b.pool,
                    bias: b.bias,
                })
                .collect(),
        };
        let bytes = serde_json::to_vec(&canonical).expect("canonical spec serializes");
        hex(&Sha256::digest(bytes))
    }

    pub fn conv_layer_name(layer: usize) -> String {
        format!("block{layer}.conv")
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Depth-then-channel enumeration of every backbone kernel.
pub fn enumerate_kernels(spec: &ModelSpec) -> Vec<KernelAddress> {
    spec.blocks
        .iter()
        .enumerate()
        .flat_map(|(layer, b)| (0..b.out_channels).map(move |channel| KernelAddress { layer, channel }))
        .collect()
}

/// Fresh classification head for `spec`, drawn from the head stream of
/// `seed` (PyTorch-style uniform ±1/√fan_in for weight and bias).
pub fn init_head<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<ParamTree> {
    let features = spec.feature_dim()?;
    let bound = 1.0 / (features as f64).sqrt();
    let mut rng = stream_rng(seed, Stream::Head, 0);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-bound..bound)).collect() };
    let weight = draw(spec.classes * features);
    let bias = draw(spec.classes);
    let mut tree = ParamTree::new();
    tree.insert(
        names::HEAD_WEIGHT,
        Tensor::<T>::from_f64(&[spec.classes, features], &weight)?,
    );
    tree.insert(names::HEAD_BIAS, Tensor::<T>::from_f64(&[spec.classes], &bias)?);
    Ok(tree)
}

/// Seeded initial parameters: Kaiming-uniform conv kernels
/// (±√(6/fan_in)), zero conv biases, identity batch norm, fresh head.
pub fn init_params<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<ParamTree> {
    let shapes = spec.block_shapes()?;
    let mut tree = ParamTree::new();
    for (i, (b, s)) in spec.blocks.iter().zip(&shapes).enumerate() {
        let fan_in = s.input[0] * b.kernel_size * b.kernel_size;
        let bound = (6.0 / fan_in as f64).sqrt();
        let mut rng = stream_rng(seed, Stream::Backbone, i as u64);
        let shape = [b.out_channels, s.input[0], b.kernel_size, b.kernel_size];
        let values: Vec<f64> = (0..shape.iter().product::<usize>())
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        tree.insert(names::conv_weight(i), Tensor::<T>::from_f64(&shape, &values)?);
        if b.bias {
            tree.insert(names::conv_bias(i), Tensor::<T>::zeros(&[b.out_channels]));
        }
        if b.use_bn {
            let c = b.out_channels;
            tree.insert(names::bn_gamma(i), Tensor::<T>::full(&[c], T::one()));
            tree.insert(names::bn_beta(i), Tensor::<T>::zeros(&[c]));
            tree.insert(names::bn_running_mean(i), Tensor::<T>::zeros(&[c]));
            tree.insert(names::bn_running_var(i), Tensor::<T>::full(&[c], T::one()));
        }
    }
    tree.extend_from(&init_head::<T>(spec, seed)?);
    Ok(tree)
}

/// Builds the graph and its parameter tree; deterministic in `(spec, seed)`.
pub fn build_model<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<(Network<T>, ParamTree)> {
    let tree = init_params::<T>(spec, seed)?;
    let net = Network::from_tree(spec, &tree)?;
    Ok((net, tree))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CongruenceReport {
    /// Backbone entries that are missing on one side or differ in shape.
    pub mismatches: Vec<String>,
    /// Head differences; these never block a merge.
    pub head_notes: Vec<String>,
}

impl CongruenceReport {
    pub fn is_ok(&self) -> bool {
        self.mismatches.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::Incongruent(self.mismatches.join("; ")))
        }
    }
}

/// Compares backbone entry names and shapes. Heads are re-initialized per
/// target task, so head differences are only noted.
pub fn check_congruent(a: &ParamTree, b: &ParamTree) -> CongruenceReport {
    let mut report = CongruenceReport::default();
    for (name, ta) in a.backbone() {
        match b.get(name) {
            None => report.mismatches.push(format!("`{name}` missing from second tree")),
            Some(tb) if ta.shape() != tb.shape() => {
                report
                    .mismatches
                    .push(format!("`{name}` has shape {:?} vs {:?}", ta.shape(), tb.shape()))
            }
            Some(_) => {}
        }
    }
    for (name, _) in b.backbone() {
        if a.get(name).is_none() {
            report.mismatches.push(format!("`{name}` missing from first tree"));
        }
    }
    let head_a: Vec<_> = a.head().map(|(k, t)| (k.to_string(), t.shape().to_vec())).collect();
    let head_b: Vec<_> = b.head().map(|(k, t)| (k.to_string(), t.shape().to_vec())).collect();
    if head_a != head_b {
        report
            .head_notes
            .push(format!("heads differ: {head_a:?} vs {head_b:?}"));
    }
    report
}
