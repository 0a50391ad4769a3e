//! Learned kernel-level merging of two congruent backbones.
//!
//! Every backbone kernel (one conv output channel, with its bias if any)
//! gets a logit `α`. Its merge coefficient is `w = σ(α)`, and the merged
//! kernel is `w·θ_b + (1 − w)·θ_c`. Source kernels never change; gradients
//! reach the logits through
//!
//! ```text
//! ∂L/∂α = σ'(α) · ⟨∂L/∂θ̂, θ_b − θ_c⟩
//! ```
//!
//! Batch-norm layers are not weighted: they start from the elementwise mean
//! of the two sources and are trained directly. The head is never merged.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Network;
use crate::params::{names, ParamTree};
use crate::tensor::{AnyTensor, Scalar, Tensor};
use crate::zoo::{check_congruent, enumerate_kernels, init_head, KernelAddress, ModelSpec};

/// Logistic function, evaluated without overflow for any finite input.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Per-channel pair `(σ(α), σ(−α))`. Both halves come from the same
/// function, so swapping sources and negating logits reproduces the same
/// arithmetic exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeCoefficients<T> {
    pub toward_b: Vec<T>,
    pub toward_c: Vec<T>,
}

impl<T: Scalar> MergeCoefficients<T> {
    pub fn from_logits(logits: &[T]) -> Self {
        Self {
            toward_b: logits.iter().map(|&a| sigmoid(a)).collect(),
            toward_c: logits.iter().map(|&a| sigmoid(-a)).collect(),
        }
    }

    pub fn uniform(channels: usize, w: T) -> Self {
        Self {
            toward_b: vec![w; channels],
            toward_c: vec![T::one() - w; channels],
        }
    }

    pub fn len(&self) -> usize {
        self.toward_b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.toward_b.is_empty()
    }
}

/// Convex combination of two kernels, one coefficient per slice of the
/// leading (output-channel) axis.
///
/// Equal source elements are returned unchanged and every result lies in
/// the closed interval spanned by its two sources.
pub fn merged_kernel<T: Scalar>(kb: &Tensor<T>, kc: &Tensor<T>, coeffs: &MergeCoefficients<T>) -> Result<Tensor<T>> {
    if kb.shape() != kc.shape() {
        return Err(Error::Shape(format!(
            "cannot merge kernels of shape {:?} and {:?}",
            kb.shape(),
            kc.shape()
        )));
    }
    let channels = kb.shape().first().copied().unwrap_or(1);
    if channels != coeffs.len() {
        return Err(Error::Shape(format!(
            "{} merge coefficients for {channels} output channels",
            coeffs.len()
        )));
    }
    let per = kb.numel().checked_div(channels).unwrap_or(0);
    let mut out = Vec::with_capacity(kb.numel());
    for ch in 0..channels {
        let (p, q) = (coeffs.toward_b[ch], coeffs.toward_c[ch]);
        let range = ch * per..(ch + 1) * per;
        for (&a, &b) in kb.data()[range.clone()].iter().zip(&kc.data()[range]) {
            out.push(if a == b {
                a
            } else {
                (p * a + q * b).max(a.min(b)).min(a.max(b))
            });
        }
    }
    Tensor::new(kb.shape().to_vec(), out)
}

/// `σ'(α_j)·⟨g_j, kb_j − kc_j⟩` for every output channel `j`, where `g`
/// is the gradient with respect to the merged kernel.
pub fn merged_kernel_logit_grad<T: Scalar>(
    kb: &Tensor<T>,
    kc: &Tensor<T>,
    grad_merged: &Tensor<T>,
    logits: &[T],
) -> Result<Vec<T>> {
    if kb.shape() != kc.shape() || kb.shape() != grad_merged.shape() {
        return Err(Error::Shape("merge gradient operands differ in shape".into()));
    }
    let channels = logits.len();
    let per = kb.numel().checked_div(channels).unwrap_or(0);
    Ok((0..channels)
        .map(|ch| {
            let r = ch * per..(ch + 1) * per;
            let dot = kb.data()[r.clone()]
                .iter()
                .zip(&kc.data()[r.clone()])
                .zip(&grad_merged.data()[r])
                .fold(T::zero(), |acc, ((&a, &b), &g)| acc + g * (a - b));
            logit_slope(logits[ch]) * dot
        })
        .collect())
}

pub(crate) fn merged_bias_grad<T: Scalar>(bb: &[T], bc: &[T], grad: &[T], logits: &[T]) -> Vec<T> {
    logits
        .iter()
        .enumerate()
        .map(|(j, &a)| logit_slope(a) * (grad[j] * (bb[j] - bc[j])))
        .collect()
}

/// σ'(α) = σ(α)·σ(−α).
pub fn logit_slope<T: Scalar>(alpha: T) -> T {
    sigmoid(alpha) * sigmoid(-alpha)
}

/// One learnable logit per backbone kernel, stored layer by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeWeights {
    layers: Vec<Vec<f64>>,
}

const MMW_HEADER: &str = "# medmerge merge weights v1";
const MMW_COLUMNS: &str = "layer,channel,alpha";

impl MergeWeights {
    /// All logits zero, i.e. every kernel starts as an equal merge.
    pub fn init(spec: &ModelSpec) -> Result<Self> {
        if spec.kernel_count() == 0 {
            return Err(Error::Degenerate("spec has no convolutional kernels to merge".into()));
        }
        Ok(Self {
            layers: spec.blocks.iter().map(|b| vec![0.0; b.out_channels]).collect(),
        })
    }

    pub fn from_layers(layers: Vec<Vec<f64>>) -> Result<Self> {
        if layers.iter().flatten().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("merge logits".into()));
        }
        Ok(Self { layers })
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_logits(&self, layer: usize) -> &[f64] {
        &self.layers[layer]
    }

    pub fn logit(&self, addr: KernelAddress) -> Option<f64> {
        self.layers.get(addr.layer)?.get(addr.channel).copied()
    }

    pub fn set_logit(&mut self, addr: KernelAddress, alpha: f64) -> Result<()> {
        let slot = self
            .layers
            .get_mut(addr.layer)
            .and_then(|l| l.get_mut(addr.channel))
            .ok_or_else(|| Error::MergeWeightsMismatch(format!("no kernel at {addr}")))?;
        *slot = alpha;
        Ok(())
    }

    /// Effective coefficient toward source b.
    pub fn weight(&self, addr: KernelAddress) -> Option<f64> {
        self.logit(addr).map(sigmoid)
    }

    pub fn layer_weights(&self, layer: usize) -> Vec<f64> {
        self.layers[layer].iter().map(|&a| sigmoid(a)).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (KernelAddress, f64)> + '_ {
        self.layers.iter().enumerate().flat_map(|(layer, ls)| {
            ls.iter()
                .enumerate()
                .map(move |(channel, &a)| (KernelAddress { layer, channel }, a))
        })
    }

    pub fn map_logits(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            layers: self.layers.iter().map(|l| l.iter().map(|&a| f(a)).collect()).collect(),
        }
    }

    pub fn check_matches(&self, spec: &ModelSpec) -> Result<()> {
        let addrs: Vec<_> = self.iter().map(|(a, _)| a).collect();
        if addrs != enumerate_kernels(spec) || self.layers.len() != spec.blocks.len() {
            return Err(Error::MergeWeightsMismatch(format!(
                "{} logits over {} layers vs spec `{}` with {} kernels over {} layers",
                self.len(),
                self.layers.len(),
                spec.name,
                spec.kernel_count(),
                spec.blocks.len()
            )));
        }
        Ok(())
    }

    pub(crate) fn coefficients<T: Scalar>(&self, layer: usize) -> MergeCoefficients<T> {
        let logits: Vec<T> = self.layers[layer].iter().map(|&a| T::of(a)).collect();
        MergeCoefficients::from_logits(&logits)
    }

    /// `.mmw` text: a header line, a column line, then one
    /// `layer,channel,alpha` row per kernel in address order. Logits use
    /// shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut s = format!("{MMW_HEADER}\n{MMW_COLUMNS}\n");
        for (addr, alpha) in self.iter() {
            writeln!(s, "{},{},{:?}", addr.layer, addr.channel, alpha).expect("write to string");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MMW_HEADER) || lines.next() != Some(MMW_COLUMNS) {
            return Err(Error::Parse("missing merge-weights header".into()));
        }
        let mut layers: Vec<Vec<f64>> = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::Parse(format!("merge-weights row {}: `{line}`", i + 1));
            let mut parts = line.split(',');
            let layer: usize = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
            let channel: usize = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
            let alpha: f64 = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
            if parts.next().is_some() {
                return Err(bad());
            }
            if layer == layers.len() {
                layers.push(Vec::new());
            }
            if layer + 1 != layers.len() || channel != layers[layer].len() {
                return Err(Error::Parse(format!(
                    "merge-weights rows out of address order at ({layer}, {channel})"
                )));
            }
            layers[layer].push(alpha);
        }
        Self::from_layers(layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Two congruent source backbones and the architecture they share.
#[derive(Debug, Clone)]
pub struct MergePair {
    pub source_b: ParamTree,
    pub source_c: ParamTree,
    pub spec: ModelSpec,
}

impl MergePair {
    pub fn new(source_b: ParamTree, source_c: ParamTree, spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        check_congruent(&source_b, &source_c).into_result()?;
        let expected = init_params_shapes(&spec)?;
        for (name, shape) in &expected {
            let t = source_b.require(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Incongruent(format!(
                    "`{name}` has shape {:?}, spec `{}` expects {shape:?}",
                    t.shape(),
                    spec.name
                )));
            }
        }
        if source_b.backbone().count() != expected.len() {
            return Err(Error::Incongruent(format!(
                "sources carry backbone entries that spec `{}` does not define",
                spec.name
            )));
        }
        Ok(Self {
            source_b,
            source_c,
            spec,
        })
    }

    /// Both sources have all-zero conv kernels.
    pub fn is_degenerate(&self) -> bool {
        is_zero_backbone(&self.source_b) && is_zero_backbone(&self.source_c)
    }

    pub fn swapped(&self) -> Self {
        Self {
            source_b: self.source_c.clone(),
            source_c: self.source_b.clone(),
            spec: self.spec.clone(),
        }
    }
}

fn init_params_shapes(spec: &ModelSpec) -> Result<Vec<(String, Vec<usize>)>> {
    let shapes = spec.block_shapes()?;
    let mut out = Vec::new();
    for (i, (b, s)) in spec.blocks.iter().zip(&shapes).enumerate() {
        out.push((
            names::conv_weight(i),
            vec![b.out_channels, s.input[0], b.kernel_size, b.kernel_size],
        ));
        if b.bias {
            out.push((names::conv_bias(i), vec![b.out_channels]));
        }
        if b.use_bn {
            for n in names::bn_entries(i) {
                out.push((n, vec![b.out_channels]));
            }
        }
    }
    Ok(out)
}

pub fn is_zero_backbone(tree: &ParamTree) -> bool {
    tree.backbone()
        .filter(|(k, _)| names::is_conv(k))
        .all(|(_, t)| t.to_f64_vec().iter().all(|&v| v == 0.0))
}

fn elementwise_mean(a: &AnyTensor, b: &AnyTensor) -> Result<AnyTensor> {
    if a.shape() != b.shape() {
        return Err(Error::Incongruent(format!(
            "cannot average shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    fn mean<T: Scalar>(a: &AnyTensor, b: &AnyTensor) -> Result<AnyTensor> {
        let (x, y) = (a.to::<T>(), b.to::<T>());
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| (p + q) / T::of(2.0))
            .collect();
        Ok(Tensor::<T>::new(x.shape().to_vec(), data)?.into())
    }
    match a.dtype() {
        crate::tensor::DType::F32 => mean::<f32>(a, b),
        crate::tensor::DType::F64 => mean::<f64>(a, b),
    }
}

/// Batch-norm state of the merged model: every BN tensor (γ, β, running
/// mean and variance) is the elementwise arithmetic mean of the sources.
pub fn bn_mean_init(pair: &MergePair) -> Result<ParamTree> {
    let mut out = ParamTree::new();
    for (name, tb) in pair.source_b.backbone().filter(|(k, _)| names::is_bn(k)) {
        let tc = pair.source_c.require(name)?;
        out.insert(name, elementwise_mean(tb, tc)?);
    }
    Ok(out)
}

/// Materializes the merged parameters: kernels combined with the learned
/// coefficients, batch norm and head taken as trained. All tensors come out
/// in dtype `T`, the dtype the merged graph ran in.
pub fn bake<T: Scalar>(
    pair: &MergePair,
    weights: &MergeWeights,
    trained_bn: &ParamTree,
    trained_head: &ParamTree,
) -> Result<ParamTree> {
    weights.check_matches(&pair.spec)?;
    let mut out = ParamTree::new();
    for (i, block) in pair.spec.blocks.iter().enumerate() {
        let coeffs = weights.coefficients::<T>(i);
        let mut kernel_names = vec![names::conv_weight(i)];
        if block.bias {
            kernel_names.push(names::conv_bias(i));
        }
        for name in kernel_names {
            let kb = pair.source_b.require_as::<T>(&name)?;
            let kc = pair.source_c.require_as::<T>(&name)?;
            out.insert(name, merged_kernel(&kb, &kc, &coeffs)?);
        }
        if block.use_bn {
            for name in names::bn_entries(i) {
                let t = trained_bn
                    .get(&name)
                    .ok_or_else(|| Error::MissingState(format!("trained batch norm lacks `{name}`")))?;
                out.insert(name, t.to::<T>());
            }
        }
    }
    for name in [names::HEAD_WEIGHT, names::HEAD_BIAS] {
        let t = trained_head
            .get(name)
            .ok_or_else(|| Error::MissingState(format!("trained head lacks `{name}`")))?;
        out.insert(name, t.to::<T>());
    }
    Ok(out)
}

/// Plain weight averaging: every backbone tensor (kernels and BN) is the
/// elementwise mean of the sources; the head is freshly drawn from
/// `head_seed` for `spec.classes` classes.
pub fn simple_average<T: Scalar>(pair: &MergePair, head_seed: u64) -> Result<ParamTree> {
    let mut out = ParamTree::new();
    for (i, block) in pair.spec.blocks.iter().enumerate() {
        let coeffs = MergeCoefficients::uniform(block.out_channels, T::of(0.5));
        let mut kernel_names = vec![names::conv_weight(i)];
        if block.bias {
            kernel_names.push(names::conv_bias(i));
        }
        for name in kernel_names {
            let kb = pair.source_b.require_as::<T>(&name)?;
            let kc = pair.source_c.require_as::<T>(&name)?;
            out.insert(name, merged_kernel(&kb, &kc, &coeffs)?);
        }
    }
    for (name, t) in bn_mean_init(pair)?.iter() {
        out.insert(name, t.to::<T>());
    }
    out.extend_from(&init_head::<T>(&pair.spec, head_seed)?);
    Ok(out)
}

/// All-zero conv kernels with identity batch norm (γ = 1, β = 0,
/// running mean 0, running variance 1) and a head drawn from seed 0.
pub fn zero_source<T: Scalar>(spec: &ModelSpec) -> Result<ParamTree> {
    let shapes = spec.block_shapes()?;
    let mut out = ParamTree::new();
    for (i, (b, s)) in spec.blocks.iter().zip(&shapes).enumerate() {
        let c = b.out_channels;
        out.insert(
            names::conv_weight(i),
            Tensor::<T>::zeros(&[c, s.input[0], b.kernel_size, b.kernel_size]),
        );
        if b.bias {
            out.insert(names::conv_bias(i), Tensor::<T>::zeros(&[c]));
        }
        if b.use_bn {
            out.insert(names::bn_gamma(i), Tensor::<T>::full(&[c], T::one()));
            out.insert(names::bn_beta(i), Tensor::<T>::zeros(&[c]));
            out.insert(names::bn_running_mean(i), Tensor::<T>::zeros(&[c]));
            out.insert(names::bn_running_var(i), Tensor::<T>::full(&[c], T::one()));
        }
    }
    out.extend_from(&init_head::<T>(spec, 0)?);
    Ok(out)
}

/// Graph whose conv kernels are recomputed from the frozen sources and the
/// current logits on every forward pass. Batch norm starts from
/// [`bn_mean_init`] and is trainable; `head` must match `pair.spec.classes`.
pub fn build_virtual_merged_graph<T: Scalar>(
    pair: &MergePair,
    weights: &MergeWeights,
    head: &ParamTree,
) -> Result<Network<T>> {
    let bn = bn_mean_init(pair)?;
    Network::virtual_merged(pair, weights, &bn, head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::init_params;

    fn t2(vals: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[1, vals.len()], vals).unwrap()
    }

    #[test]
    fn merged_kernel_direct_arithmetic() {
        let kb = Tensor::<f64>::from_f64(&[1, 2, 2], &[1., 2., 3., 4.]).unwrap();
        let kc = Tensor::zeros(&[1, 2, 2]);
        let c = MergeCoefficients::uniform(1, 0.25);
        let m = merged_kernel(&kb, &kc, &c).unwrap();
        assert_eq!(m.data(), &[0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn equal_sources_are_returned_exactly() {
        let k = t2(&[0.1, -0.7, 1e-20, 3.3]);
        for a in [-5.0, -0.3, 0.0, 0.9, 12.0] {
            let c = MergeCoefficients::from_logits(&[a]);
            assert_eq!(merged_kernel(&k, &k, &c).unwrap(), k);
        }
    }

    #[test]
    fn saturated_logit_reproduces_source_b() {
        let kb = t2(&[0.1, -0.7, 1e-20, 3.3]);
        let kc = t2(&[5.0, 2.0, -1.0, 0.0]);
        let c = MergeCoefficients::from_logits(&[1000.0]);
        assert_eq!(c.toward_b[0], 1.0);
        assert_eq!(c.toward_c[0], 0.0);
        assert_eq!(merged_kernel(&kb, &kc, &c).unwrap(), kb);
    }

    #[test]
    fn sigmoid_identities() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((sigmoid(4.0f64) - 0.9820137900379085).abs() < 1e-15);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert!((logit_slope(0.0f64) - 0.25).abs() < 1e-16);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let c = MergeCoefficients::uniform(1, 0.5);
        assert!(merged_kernel(&t2(&[1.0, 2.0]), &t2(&[1.0]), &c).is_err());
    }

    #[test]
    fn init_weights_are_zero_logits() {
        let mw = MergeWeights::init(&ModelSpec::smallnet(4)).unwrap();
        assert_eq!(mw.len(), 56);
        assert!(mw.iter().all(|(_, a)| a == 0.0));
        assert!(mw.iter().all(|(addr, _)| mw.weight(addr) == Some(0.5)));
        let empty = ModelSpec {
            blocks: vec![],
            ..ModelSpec::smallnet(4)
        };
        assert!(matches!(MergeWeights::init(&empty), Err(Error::Degenerate(_))));
    }

    #[test]
    fn mmw_text_round_trip() {
        let spec = ModelSpec::smallnet_prefix(2, 3);
        let mut mw = MergeWeights::init(&spec).unwrap();
        mw.set_logit(KernelAddress { layer: 1, channel: 3 }, -0.123456789012345)
            .unwrap();
        mw.set_logit(KernelAddress { layer: 0, channel: 0 }, 1e-300).unwrap();
        let back = MergeWeights::from_text(&mw.to_text()).unwrap();
        assert_eq!(back, mw);
        back.check_matches(&spec).unwrap();
        assert!(back.check_matches(&ModelSpec::smallnet(3)).is_err());
        assert!(MergeWeights::from_text("layer,channel,alpha\n").is_err());
    }

    fn pair(seed_b: u64, seed_c: u64) -> MergePair {
        let spec = ModelSpec::smallnet_prefix(2, 3);
        MergePair::new(
            init_params::<f64>(&spec, seed_b).unwrap(),
            init_params::<f64>(&spec, seed_c).unwrap(),
            spec,
        )
        .unwrap()
    }

    #[test]
    fn bn_mean_is_arithmetic_mean() {
        let mut p = pair(1, 2);
        p.source_b
            .insert(names::bn_running_mean(0), Tensor::<f64>::full(&[8], 1.0));
        p.source_c
            .insert(names::bn_running_mean(0), Tensor::<f64>::full(&[8], 3.0));
        p.source_b.insert(names::bn_gamma(1), Tensor::<f64>::full(&[16], 0.5));
        p.source_c.insert(names::bn_gamma(1), Tensor::<f64>::full(&[16], 1.5));
        let bn = bn_mean_init(&p).unwrap();
        assert!(bn
            .require_as::<f64>(&names::bn_running_mean(0))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 2.0));
        assert!(bn
            .require_as::<f64>(&names::bn_gamma(1))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
        assert_eq!(bn.len(), 8);
        let same = MergePair::new(p.source_b.clone(), p.source_b.clone(), p.spec.clone()).unwrap();
        let bn_same = bn_mean_init(&same).unwrap();
        for (k, v) in bn_same.iter() {
            assert!(v.bit_eq(p.source_b.get(k).unwrap()));
        }
    }

    #[test]
    fn simple_average_equals_bake_at_zero_logits() {
        let p = pair(3, 4);
        let avg = simple_average::<f64>(&p, 11).unwrap();
        let mw = MergeWeights::init(&p.spec).unwrap();
        let head = init_head::<f64>(&p.spec, 11).unwrap();
        let baked = bake::<f64>(&p, &mw, &bn_mean_init(&p).unwrap(), &head).unwrap();
        assert!(avg.bit_eq(&baked));
    }

    #[test]
    fn average_of_tree_with_itself_is_itself() {
        let p = pair(5, 5);
        let avg = simple_average::<f64>(&p, 0).unwrap();
        for (k, v) in p.source_b.backbone() {
            assert!(v.bit_eq(avg.get(k).unwrap()), "{k}");
        }
    }

    #[test]
    fn average_with_negation_is_zero() {
        let p = pair(6, 6);
        let mut neg = p.source_b.clone();
        for (k, v) in p.source_b.backbone() {
            if !k.ends_with("running_var") {
                neg.insert(k, v.to::<f64>().map(|x| -x));
            }
        }
        let q = MergePair::new(p.source_b.clone(), neg, p.spec.clone()).unwrap();
        let avg = simple_average::<f64>(&q, 0).unwrap();
        for (k, v) in avg.backbone().filter(|(k, _)| !k.ends_with("running_var")) {
            assert!(v.to_f64_vec().iter().all(|&x| x == 0.0), "{k}");
        }
    }

    #[test]
    fn zero_source_shapes_and_degeneracy() {
        let spec = ModelSpec::smallnet(4);
        let z = zero_source::<f64>(&spec).unwrap();
        assert!(is_zero_backbone(&z));
        let src = init_params::<f64>(&spec, 1).unwrap();
        assert!(check_congruent(&z, &src).is_ok());
        let kb = src.require_as::<f64>(&names::conv_weight(0)).unwrap();
        let kz = z.require_as::<f64>(&names::conv_weight(0)).unwrap();
        let w = 0.3;
        let m = merged_kernel(&kb, &kz, &MergeCoefficients::uniform(8, w)).unwrap();
        for (a, b) in m.data().iter().zip(kb.data()) {
            assert!((a - w * b).abs() <= 1e-16);
        }
        let deg = MergePair::new(z.clone(), z, spec).unwrap();
        assert!(deg.is_degenerate());
    }

    #[test]
    fn pair_rejects_incongruent_sources() {
        let a = init_params::<f64>(&ModelSpec::smallnet(4), 1).unwrap();
        let b = init_params::<f64>(&ModelSpec::smallnet_prefix(2, 4), 1).unwrap();
        assert!(matches!(
            MergePair::new(a, b, ModelSpec::smallnet(4)),
            Err(Error::Incongruent(_))
        ));
    }

    #[test]
    fn bake_requires_trained_state() {
        let p = pair(1, 2);
        let mw = MergeWeights::init(&p.spec).unwrap();
        let head = init_head::<f64>(&p.spec, 0).unwrap();
        assert!(matches!(
            bake::<f64>(&p, &mw, &ParamTree::new(), &head),
            Err(Error::MissingState(_))
        ));
        assert!(matches!(
            bake::<f64>(&p, &mw, &bn_mean_init(&p).unwrap(), &ParamTree::new()),
            Err(Error::MissingState(_))
        ));
    }
}
