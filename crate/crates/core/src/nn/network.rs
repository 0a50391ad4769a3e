//! Block-structured CNN: `conv → [bn] → [+skip] → act → [pool]` per block,
//! then flatten and a linear head.

use crate::error::{Error, Result};
use crate::merge::{MergePair, MergeWeights};
use crate::nn::conv::ConvGeometry;
use crate::nn::{Activation, BatchNorm2d, Conv2d, ConvKernel, Linear, MaxPool2d, Mode, Parameter};
use crate::params::{names, ParamTree};
use crate::tensor::{Scalar, Tensor};
use crate::zoo::ModelSpec;

#[derive(Debug, Clone)]
pub struct ConvBlock<T> {
    pub conv: Conv2d<T>,
    pub bn: Option<BatchNorm2d<T>>,
    pub activation: Activation,
    pub residual: bool,
    pub pool: Option<MaxPool2d>,
    activated: Option<Tensor<T>>,
}

impl<T: Scalar> ConvBlock<T> {
    fn has_trainable(&self) -> bool {
        self.conv.has_trainable() || self.bn.as_ref().is_some_and(|bn| !bn.is_frozen())
    }

    fn forward(
        &mut self,
        index: usize,
        input: &Tensor<T>,
        mode: Mode,
        taps: &mut Option<&mut Vec<(String, Tensor<T>)>>,
    ) -> Result<Tensor<T>> {
        let keep = mode == Mode::Train;
        let mut x = self.conv.forward(input, keep)?;
        if let Some(t) = taps.as_deref_mut() {
            t.push((format!("block{index}.conv"), x.clone()));
        }
        if let Some(bn) = &mut self.bn {
            x = bn.forward(&x, mode, keep)?;
            if let Some(t) = taps.as_deref_mut() {
                t.push((format!("block{index}.bn"), x.clone()));
            }
        }
        if self.residual {
            x.data_mut()
                .iter_mut()
                .zip(input.data())
                .for_each(|(a, &b)| *a = *a + b);
        }
        self.activation.forward_in_place(x.data_mut());
        if keep {
            self.activated = Some(x.clone());
        } else {
            self.activated = None;
        }
        if let Some(pool) = &mut self.pool {
            x = pool.forward(&x, keep)?;
        }
        if let Some(t) = taps.as_deref_mut() {
            t.push((format!("block{index}.out"), x.clone()));
        }
        Ok(x)
    }

    fn backward(&mut self, grad_out: &Tensor<T>, need_input_grad: bool) -> Result<Option<Tensor<T>>> {
        let mut g = match &self.pool {
            Some(pool) => pool.backward(grad_out)?,
            None => grad_out.clone(),
        };
        let activated = self.activated.as_ref().ok_or(Error::BackwardWithoutForward)?;
        g.ensure_shape(activated.shape(), "block gradient")?;
        self.activation.backward_in_place(activated.data(), g.data_mut());
        let skip = (self.residual && need_input_grad).then(|| g.clone());
        let conv_needs = self.conv.has_trainable() || need_input_grad;
        if let Some(bn) = &mut self.bn {
            match bn.backward(&g, conv_needs)? {
                Some(dx) => g = dx,
                None => return Ok(None),
            }
        }
        let mut dx = if conv_needs {
            self.conv.backward(&g, need_input_grad)?
        } else {
            None
        };
        if let (Some(dx), Some(skip)) = (&mut dx, skip) {
            dx.data_mut()
                .iter_mut()
                .zip(skip.data())
                .for_each(|(a, &b)| *a = *a + b);
        }
        Ok(dx)
    }

    fn clear_cache(&mut self) {
        self.conv.clear_cache();
        if let Some(bn) = &mut self.bn {
            bn.clear_cache();
        }
        if let Some(pool) = &mut self.pool {
            pool.clear_cache();
        }
        self.activated = None;
    }
}

/// Number of trainable scalars, by parameter group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainableCount {
    pub merge_logits: usize,
    pub conv: usize,
    pub bn: usize,
    pub head: usize,
}

impl TrainableCount {
    pub fn total(&self) -> usize {
        self.merge_logits + self.conv + self.bn + self.head
    }
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    pub spec: ModelSpec,
    pub blocks: Vec<ConvBlock<T>>,
    pub head: Linear<T>,
    feature_shape: Option<Vec<usize>>,
}

fn bn_from_tree<T: Scalar>(tree: &ParamTree, i: usize) -> Result<BatchNorm2d<T>> {
    let [g, b, m, v] = names::bn_entries(i);
    BatchNorm2d::from_state(
        tree.require_as(&g)?,
        tree.require_as(&b)?,
        tree.require_as(&m)?,
        tree.require_as(&v)?,
    )
}

impl<T: Scalar> Network<T> {
    fn assemble(
        spec: &ModelSpec,
        mut kernel: impl FnMut(usize) -> Result<ConvKernel<T>>,
        bn_tree: &ParamTree,
        head_tree: &ParamTree,
    ) -> Result<Self> {
        let shapes = spec.block_shapes()?;
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        for (i, (b, s)) in spec.blocks.iter().zip(&shapes).enumerate() {
            let geometry = ConvGeometry {
                in_channels: s.input[0],
                out_channels: b.out_channels,
                kernel_size: b.kernel_size,
                stride: b.stride,
                padding: b.padding(),
            };
            blocks.push(ConvBlock {
                conv: Conv2d::new(geometry, kernel(i)?)?,
                bn: if b.use_bn {
                    Some(bn_from_tree(bn_tree, i)?)
                } else {
                    None
                },
                activation: b.activation,
                residual: b.residual,
                pool: b.pool.map(MaxPool2d::new),
                activated: None,
            });
        }
        let head = Linear::new(
            head_tree.require_as(names::HEAD_WEIGHT)?,
            head_tree.require_as(names::HEAD_BIAS)?,
        )?;
        let features = spec.feature_dim()?;
        if head.in_features() != features || head.out_features() != spec.classes {
            return Err(Error::Shape(format!(
                "head is {}→{}, spec `{}` needs {features}→{}",
                head.in_features(),
                head.out_features(),
                spec.name,
                spec.classes
            )));
        }
        Ok(Self {
            spec: spec.clone(),
            blocks,
            head,
            feature_shape: None,
        })
    }

    /// Plain network with every parameter trainable.
    pub fn from_tree(spec: &ModelSpec, tree: &ParamTree) -> Result<Self> {
        Self::assemble(
            spec,
            |i| {
                let bias = if spec.blocks[i].bias {
                    Some(Parameter::new(tree.require_as(&names::conv_bias(i))?))
                } else {
                    None
                };
                Ok(ConvKernel::Direct {
                    weight: Parameter::new(tree.require_as(&names::conv_weight(i))?),
                    bias,
                })
            },
            tree,
            tree,
        )
    }

    /// Network whose kernels are merges of the frozen pair under trainable
    /// logits. Batch norm and head come from `bn` and `head`.
    pub fn virtual_merged(pair: &MergePair, weights: &MergeWeights, bn: &ParamTree, head: &ParamTree) -> Result<Self> {
        weights.check_matches(&pair.spec)?;
        let spec = &pair.spec;
        Self::assemble(
            spec,
            |i| {
                let frozen = |tree: &ParamTree, name: &str| -> Result<Parameter<T>> {
                    Ok(Parameter::frozen(tree.require_as(name)?))
                };
                let w = names::conv_weight(i);
                let (bias_b, bias_c) = if spec.blocks[i].bias {
                    let b = names::conv_bias(i);
                    (Some(frozen(&pair.source_b, &b)?), Some(frozen(&pair.source_c, &b)?))
                } else {
                    (None, None)
                };
                let logits: Vec<T> = weights.layer_logits(i).iter().map(|&a| T::of(a)).collect();
                Ok(ConvKernel::Merged {
                    source_b: frozen(&pair.source_b, &w)?,
                    source_c: frozen(&pair.source_c, &w)?,
                    bias_b,
                    bias_c,
                    logits: Parameter::new(Tensor::new(vec![logits.len()], logits)?),
                })
            },
            bn,
            head,
        )
    }

    pub fn is_merged(&self) -> bool {
        self.blocks
            .iter()
            .any(|b| matches!(b.conv.kernel, ConvKernel::Merged { .. }))
    }

    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.run(input, mode, None)
    }

    /// Forward pass that also records every intermediate activation as
    /// `block{i}.conv`, `block{i}.bn`, `block{i}.out` and finally `logits`.
    pub fn forward_with_taps(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Vec<(String, Tensor<T>)>> {
        let mut taps = Vec::new();
        let logits = self.run(input, mode, Some(&mut taps))?;
        taps.push(("logits".to_string(), logits));
        Ok(taps)
    }

    fn run(
        &mut self,
        input: &Tensor<T>,
        mode: Mode,
        mut taps: Option<&mut Vec<(String, Tensor<T>)>>,
    ) -> Result<Tensor<T>> {
        let [c, h, w] = self.spec.input_shape;
        match input.shape() {
            [_, ic, ih, iw] if [*ic, *ih, *iw] == [c, h, w] => {}
            s => {
                return Err(Error::Shape(format!(
                    "network `{}` expects N×{c}×{h}×{w} input, got {s:?}",
                    self.spec.name
                )))
            }
        }
        if mode == Mode::Eval {
            self.clear_cache();
        }
        let mut x = input.clone();
        for (i, block) in self.blocks.iter_mut().enumerate() {
            x = block.forward(i, &x, mode, &mut taps)?;
        }
        let n = x.shape()[0];
        let shape = x.shape().to_vec();
        let features = x.numel() / n.max(1);
        let flat = x.reshape(&[n, features])?;
        let logits = self.head.forward(&flat, mode == Mode::Train)?;
        self.feature_shape = (mode == Mode::Train).then_some(shape);
        Ok(logits)
    }

    /// Propagates the loss gradient with respect to the logits of the last
    /// train-mode forward pass, filling gradients of trainable parameters.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<()> {
        let feature_shape = self.feature_shape.take().ok_or(Error::BackwardWithoutForward)?;
        let upstream: Vec<bool> = self
            .blocks
            .iter()
            .scan(false, |any, b| {
                let before = *any;
                *any |= b.has_trainable();
                Some(before)
            })
            .collect();
        let any_backbone = self.blocks.iter().any(ConvBlock::has_trainable);
        let Some(g) = self.head.backward(grad_logits, any_backbone)? else {
            return Ok(());
        };
        let mut g = g.reshape(&feature_shape)?;
        for (i, block) in self.blocks.iter_mut().enumerate().rev() {
            if !block.has_trainable() && !upstream[i] {
                break;
            }
            match block.backward(&g, upstream[i])? {
                Some(dx) => g = dx,
                None => break,
            }
        }
        Ok(())
    }

    pub fn clear_cache(&mut self) {
        self.blocks.iter_mut().for_each(ConvBlock::clear_cache);
        self.head.clear_cache();
        self.feature_shape = None;
    }

    /// Every parameter with its full dotted name.
    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        let mut out = Vec::new();
        for (i, block) in self.blocks.iter_mut().enumerate() {
            for (n, p) in block.conv.parameters_mut() {
                out.push((format!("backbone.{i}.conv.{n}"), p));
            }
            if let Some(bn) = &mut block.bn {
                for (n, p) in bn.parameters_mut() {
                    out.push((format!("backbone.{i}.bn.{n}"), p));
                }
            }
        }
        for (n, p) in self.head.parameters_mut() {
            out.push((format!("head.{n}"), p));
        }
        out
    }

    pub fn trainable_count(&mut self) -> TrainableCount {
        let mut c = TrainableCount::default();
        for (name, p) in self.parameters_mut() {
            if !p.trainable {
                continue;
            }
            let slot = if name.ends_with("merge_logits") {
                &mut c.merge_logits
            } else if names::is_bn(&name) {
                &mut c.bn
            } else if names::is_conv(&name) {
                &mut c.conv
            } else {
                &mut c.head
            };
            *slot += p.numel();
        }
        c
    }

    /// Conv kernels (or merge logits) trainable or not.
    pub fn set_conv_trainable(&mut self, trainable: bool) {
        for block in &mut self.blocks {
            match &mut block.conv.kernel {
                ConvKernel::Direct { weight, bias } => {
                    weight.trainable = trainable;
                    if let Some(b) = bias {
                        b.trainable = trainable;
                    }
                }
                ConvKernel::Merged { logits, .. } => logits.trainable = trainable,
            }
        }
    }

    pub fn set_bn_frozen(&mut self, frozen: bool) {
        for bn in self.blocks.iter_mut().filter_map(|b| b.bn.as_mut()) {
            bn.set_frozen(frozen);
        }
    }

    pub fn set_head_trainable(&mut self, trainable: bool) {
        self.head.weight.trainable = trainable;
        self.head.bias.trainable = trainable;
    }

    /// Head-only training: conv frozen, batch norm frozen in eval behaviour.
    pub fn freeze_for_linear_probe(&mut self) {
        self.set_conv_trainable(false);
        self.set_bn_frozen(true);
        self.set_head_trainable(true);
    }

    pub fn unfreeze_all(&mut self) {
        self.set_conv_trainable(true);
        self.set_bn_frozen(false);
        self.set_head_trainable(true);
    }

    pub fn bn_tree(&self) -> ParamTree {
        let mut tree = ParamTree::new();
        for (i, block) in self.blocks.iter().enumerate() {
            if let Some(bn) = &block.bn {
                let [g, b, m, v] = names::bn_entries(i);
                tree.insert(g, bn.gamma.value.clone());
                tree.insert(b, bn.beta.value.clone());
                tree.insert(m, bn.running_mean.clone());
                tree.insert(v, bn.running_var.clone());
            }
        }
        tree
    }

    pub fn head_tree(&self) -> ParamTree {
        let mut tree = ParamTree::new();
        tree.insert(names::HEAD_WEIGHT, self.head.weight.value.clone());
        tree.insert(names::HEAD_BIAS, self.head.bias.value.clone());
        tree
    }

    /// Current logits of a merged network.
    pub fn merge_weights(&self) -> Result<MergeWeights> {
        let layers = self
            .blocks
            .iter()
            .map(|b| match &b.conv.kernel {
                ConvKernel::Merged { logits, .. } => Ok(logits.value.to_f64_vec()),
                ConvKernel::Direct { .. } => Err(Error::InvalidArgument("network is not a merged graph".into())),
            })
            .collect::<Result<Vec<_>>>()?;
        MergeWeights::from_layers(layers)
    }

    /// Parameters as a plain tree. Merged kernels are written as their
    /// effective values.
    pub fn to_tree(&self) -> Result<ParamTree> {
        let mut tree = ParamTree::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let (w, b) = block.conv.effective_weights()?;
            tree.insert(names::conv_weight(i), w);
            if let Some(b) = b {
                tree.insert(names::conv_bias(i), b);
            }
        }
        tree.extend_from(&self.bn_tree());
        tree.extend_from(&self.head_tree());
        Ok(tree)
    }
}
