//! 2-D convolution with square kernels, symmetric zero padding and an
//! optional per-output-channel bias.

use crate::error::{Error, Result};
use crate::merge::{merged_bias_grad, merged_kernel, merged_kernel_logit_grad, MergeCoefficients};
use crate::nn::{check_rank4, Parameter};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_size, self.kernel_size]
    }

    pub fn output_extent(&self, extent: usize) -> Option<usize> {
        let padded = extent + 2 * self.padding;
        if padded < self.kernel_size || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel_size) / self.stride + 1)
    }
}

/// Where a convolution's effective kernel comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvKernel<T> {
    Direct {
        weight: Parameter<T>,
        bias: Option<Parameter<T>>,
    },
    /// Recomputed every forward pass as a per-output-channel convex
    /// combination of two frozen source kernels.
    Merged {
        source_b: Parameter<T>,
        source_c: Parameter<T>,
        bias_b: Option<Parameter<T>>,
        bias_c: Option<Parameter<T>>,
        /// One logit per output channel.
        logits: Parameter<T>,
    },
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub geometry: ConvGeometry,
    pub kernel: ConvKernel<T>,
    effective: Option<(Tensor<T>, Option<Tensor<T>>)>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(geometry: ConvGeometry, kernel: ConvKernel<T>) -> Result<Self> {
        let shape = geometry.weight_shape();
        let check_bias = |b: &Option<Parameter<T>>| -> Result<()> {
            match b {
                Some(b) => b.value.ensure_shape(&[geometry.out_channels], "conv bias"),
                None => Ok(()),
            }
        };
        match &kernel {
            ConvKernel::Direct { weight, bias } => {
                weight.value.ensure_shape(&shape, "conv weight")?;
                check_bias(bias)?;
            }
            ConvKernel::Merged {
                source_b,
                source_c,
                bias_b,
                bias_c,
                logits,
            } => {
                source_b.value.ensure_shape(&shape, "merge source b kernel")?;
                source_c.value.ensure_shape(&shape, "merge source c kernel")?;
                if bias_b.is_some() != bias_c.is_some() {
                    return Err(Error::Incongruent("only one merge source carries a conv bias".into()));
                }
                check_bias(bias_b)?;
                check_bias(bias_c)?;
                logits.value.ensure_shape(&[geometry.out_channels], "merge logits")?;
            }
        }
        Ok(Self {
            geometry,
            kernel,
            effective: None,
            input: None,
        })
    }

    /// The kernel and bias actually applied by `forward`.
    pub fn effective_weights(&self) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        match &self.kernel {
            ConvKernel::Direct { weight, bias } => Ok((weight.value.clone(), bias.as_ref().map(|b| b.value.clone()))),
            ConvKernel::Merged {
                source_b,
                source_c,
                bias_b,
                bias_c,
                logits,
            } => {
                let coeffs = MergeCoefficients::from_logits(logits.value.data());
                let w = merged_kernel(&source_b.value, &source_c.value, &coeffs)?;
                let b = match (bias_b, bias_c) {
                    (Some(bb), Some(bc)) => Some(merged_kernel(&bb.value, &bc.value, &coeffs)?),
                    _ => None,
                };
                Ok((w, b))
            }
        }
    }

    pub fn forward(&mut self, input: &Tensor<T>, keep_cache: bool) -> Result<Tensor<T>> {
        let (weight, bias) = self.effective_weights()?;
        let out = conv2d_forward(input, &weight, bias.as_ref(), self.geometry)?;
        if keep_cache {
            self.input = Some(input.clone());
            self.effective = Some((weight, bias));
        } else {
            self.input = None;
            self.effective = None;
        }
        Ok(out)
    }

    pub(crate) fn needs_parameter_grads(&self) -> bool {
        match &self.kernel {
            ConvKernel::Direct { weight, bias } => weight.trainable || bias.as_ref().is_some_and(|b| b.trainable),
            ConvKernel::Merged { logits, .. } => logits.trainable,
        }
    }

    pub(crate) fn has_trainable(&self) -> bool {
        self.needs_parameter_grads()
    }

    /// Populates parameter gradients and returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(&mut self, grad_out: &Tensor<T>, need_input_grad: bool) -> Result<Option<Tensor<T>>> {
        let input = self.input.as_ref().ok_or(Error::BackwardWithoutForward)?;
        let (weight, _) = self.effective.as_ref().ok_or(Error::BackwardWithoutForward)?;
        let need_params = self.needs_parameter_grads();
        let grads = conv2d_backward(input, weight, grad_out, self.geometry, need_input_grad, need_params)?;
        if need_params {
            let grad_weight = grads.weight.expect("requested");
            let grad_bias = grads.bias.expect("requested");
            match &mut self.kernel {
                ConvKernel::Direct { weight, bias } => {
                    weight.set_grad(grad_weight)?;
                    if let Some(b) = bias {
                        b.set_grad(grad_bias)?;
                    }
                }
                ConvKernel::Merged {
                    source_b,
                    source_c,
                    bias_b,
                    bias_c,
                    logits,
                } => {
                    let mut g =
                        merged_kernel_logit_grad(&source_b.value, &source_c.value, &grad_weight, logits.value.data())?;
                    if let (Some(bb), Some(bc)) = (bias_b, bias_c) {
                        let gb =
                            merged_bias_grad(bb.value.data(), bc.value.data(), grad_bias.data(), logits.value.data());
                        g.iter_mut().zip(gb).for_each(|(a, b)| *a = *a + b);
                    }
                    logits.set_grad(Tensor::new(vec![g.len()], g)?)?;
                }
            }
        }
        Ok(grads.input)
    }

    pub(crate) fn clear_cache(&mut self) {
        self.input = None;
        self.effective = None;
    }

    pub fn parameters_mut(&mut self) -> Vec<(&'static str, &mut Parameter<T>)> {
        match &mut self.kernel {
            ConvKernel::Direct { weight, bias } => {
                let mut v = vec![("weight", weight)];
                if let Some(b) = bias {
                    v.push(("bias", b));
                }
                v
            }
            ConvKernel::Merged {
                source_b,
                source_c,
                bias_b,
                bias_c,
                logits,
            } => {
                let mut v = vec![("source_b.weight", source_b), ("source_c.weight", source_c)];
                if let Some(b) = bias_b {
                    v.push(("source_b.bias", b));
                }
                if let Some(b) = bias_c {
                    v.push(("source_c.bias", b));
                }
                v.push(("merge_logits", logits));
                v
            }
        }
    }
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

/// Valid output positions `o` with `0 <= o*stride + offset < extent`.
fn valid_range(out_extent: usize, extent: usize, stride: usize, offset: isize) -> (usize, usize) {
    let mut lo = 0usize;
    while lo < out_extent && ((lo * stride) as isize + offset) < 0 {
        lo += 1;
    }
    let mut hi = out_extent;
    while hi > lo && ((hi - 1) * stride) as isize + offset >= extent as isize {
        hi -= 1;
    }
    (lo, hi)
}

/// Direct convolution. Each output accumulates `bias + Σ w·x` in
/// (in_channel, kernel_row, kernel_col) order, skipping padded taps.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: ConvGeometry,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = check_rank4(input, "conv2d input")?;
    if c != g.in_channels {
        return Err(Error::Shape(format!(
            "conv2d expects {} input channels, got {c}",
            g.in_channels
        )));
    }
    weight.ensure_shape(&g.weight_shape(), "conv2d weight")?;
    let (oh, ow) = match (g.output_extent(h), g.output_extent(w)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::Shape(format!(
                "conv2d kernel {} does not fit a {h}×{w} input",
                g.kernel_size
            )))
        }
    };
    let k = g.kernel_size;
    let s = g.stride;
    let p = g.padding as isize;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![T::zero(); n * g.out_channels * oh * ow];
    for b in 0..n {
        for oc in 0..g.out_channels {
            let plane = &mut out[(b * g.out_channels + oc) * oh * ow..][..oh * ow];
            if let Some(bias) = bias {
                plane.fill(bias.data()[oc]);
            }
            for ic in 0..c {
                let xin = &x[(b * c + ic) * h * w..][..h * w];
                for kh in 0..k {
                    let (r_lo, r_hi) = valid_range(oh, h, s, kh as isize - p);
                    for kw in 0..k {
                        let wv = wt[((oc * c + ic) * k + kh) * k + kw];
                        let (c_lo, c_hi) = valid_range(ow, w, s, kw as isize - p);
                        for r in r_lo..r_hi {
                            let ir = (r * s + kh) as isize - p;
                            let xrow = &xin[ir as usize * w..][..w];
                            let orow = &mut plane[r * ow..][..ow];
                            if s == 1 {
                                let start = (c_lo as isize + kw as isize - p) as usize;
                                let span = c_hi - c_lo;
                                for (o, &xv) in orow[c_lo..c_hi].iter_mut().zip(&xrow[start..start + span]) {
                                    *o = *o + wv * xv;
                                }
                            } else {
                                for col in c_lo..c_hi {
                                    let ic_col = ((col * s + kw) as isize - p) as usize;
                                    orow[col] = orow[col] + wv * xrow[ic_col];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let out = Tensor::new(vec![n, g.out_channels, oh, ow], out)?;
    out.ensure_finite("conv2d output")?;
    Ok(out)
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: ConvGeometry,
    need_input: bool,
    need_params: bool,
) -> Result<ConvGrads<T>> {
    let [n, c, h, w] = check_rank4(input, "conv2d input")?;
    let [gn, go, oh, ow] = check_rank4(grad_out, "conv2d output gradient")?;
    if gn != n || go != g.out_channels || Some(oh) != g.output_extent(h) || Some(ow) != g.output_extent(w) {
        return Err(Error::Shape(format!(
            "conv2d output gradient {:?} does not match input {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let k = g.kernel_size;
    let s = g.stride;
    let p = g.padding as isize;
    let x = input.data();
    let wt = weight.data();
    let dy = grad_out.data();
    let mut dx = if need_input {
        vec![T::zero(); x.len()]
    } else {
        Vec::new()
    };
    let mut dw = if need_params {
        vec![T::zero(); wt.len()]
    } else {
        Vec::new()
    };
    let mut db = if need_params {
        vec![T::zero(); g.out_channels]
    } else {
        Vec::new()
    };

    for b in 0..n {
        for oc in 0..g.out_channels {
            let gplane = &dy[(b * g.out_channels + oc) * oh * ow..][..oh * ow];
            if need_params {
                db[oc] = gplane.iter().fold(db[oc], |acc, &v| acc + v);
            }
            for ic in 0..c {
                let base = (b * c + ic) * h * w;
                for kh in 0..k {
                    let (r_lo, r_hi) = valid_range(oh, h, s, kh as isize - p);
                    for kw in 0..k {
                        let widx = ((oc * c + ic) * k + kh) * k + kw;
                        let wv = wt[widx];
                        let (c_lo, c_hi) = valid_range(ow, w, s, kw as isize - p);
                        let mut acc = T::zero();
                        for r in r_lo..r_hi {
                            let ir = ((r * s + kh) as isize - p) as usize;
                            let grow = &gplane[r * ow..][..ow];
                            for col in c_lo..c_hi {
                                let icol = ((col * s + kw) as isize - p) as usize;
                                let xi = base + ir * w + icol;
                                let gv = grow[col];
                                if need_params {
                                    acc = acc + gv * x[xi];
                                }
                                if need_input {
                                    dx[xi] = dx[xi] + wv * gv;
                                }
                            }
                        }
                        if need_params {
                            dw[widx] = dw[widx] + acc;
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: if need_input {
            Some(Tensor::new(input.shape().to_vec(), dx)?)
        } else {
            None
        },
        weight: if need_params {
            Some(Tensor::new(weight.shape().to_vec(), dw)?)
        } else {
            None
        },
        bias: if need_params {
            Some(Tensor::new(vec![g.out_channels], db)?)
        } else {
            None
        },
    })
}
