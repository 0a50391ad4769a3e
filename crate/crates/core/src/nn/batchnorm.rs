use crate::error::{Error, Result};
use crate::nn::{check_rank4, Mode, Parameter};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Per-channel batch normalization over N×C×H×W activations.
///
/// In train mode the batch mean and biased variance normalize the input and
/// the running statistics move by `momentum` toward the batch mean and the
/// unbiased batch variance. A `frozen` layer always normalizes with its
/// running statistics and never updates them.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub epsilon: T,
    frozen: bool,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self::from_state(
            Tensor::full(&[channels], T::one()),
            Tensor::zeros(&[channels]),
            Tensor::zeros(&[channels]),
            Tensor::full(&[channels], T::one()),
        )
        .expect("consistent channel extents")
    }

    pub fn from_state(
        gamma: Tensor<T>,
        beta: Tensor<T>,
        running_mean: Tensor<T>,
        running_var: Tensor<T>,
    ) -> Result<Self> {
        let c = gamma.numel();
        for (t, what) in [
            (&gamma, "bn gamma"),
            (&beta, "bn beta"),
            (&running_mean, "bn running_mean"),
            (&running_var, "bn running_var"),
        ] {
            t.ensure_shape(&[c], what)?;
        }
        if running_var.data().iter().any(|&v| v < T::zero()) {
            return Err(Error::InvalidArgument("bn running_var must be non-negative".into()));
        }
        Ok(Self {
            gamma: Parameter::new(gamma),
            beta: Parameter::new(beta),
            running_mean,
            running_var,
            momentum: T::of(DEFAULT_MOMENTUM),
            epsilon: T::of(DEFAULT_EPSILON),
            frozen: false,
            cache: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Freezing fixes gamma/beta and switches normalization to the running
    /// statistics, which then stay untouched.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        self.gamma.trainable = !frozen;
        self.beta.trainable = !frozen;
    }

    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode, keep_cache: bool) -> Result<Tensor<T>> {
        let [n, c, h, w] = check_rank4(input, "batch norm input")?;
        if c != self.channels() {
            return Err(Error::Shape(format!(
                "batch norm has {} channels, input has {c}",
                self.channels()
            )));
        }
        let plane = h * w;
        let count = n * plane;
        let x = input.data();
        let batch_stats = mode == Mode::Train && !self.frozen;
        let (mean, inv_std) = if batch_stats {
            if count < 2 {
                return Err(Error::InvalidArgument(
                    "batch norm needs more than one value per channel in train mode".into(),
                ));
            }
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let cnt = T::from_usize(count).expect("count fits");
            for ch in 0..c {
                let mut sum = T::zero();
                for b in 0..n {
                    for &v in &x[(b * c + ch) * plane..][..plane] {
                        sum = sum + v;
                    }
                }
                let m = sum / cnt;
                let mut sq = T::zero();
                for b in 0..n {
                    for &v in &x[(b * c + ch) * plane..][..plane] {
                        let d = v - m;
                        sq = sq + d * d;
                    }
                }
                mean[ch] = m;
                var[ch] = sq / cnt;
            }
            let one = T::one();
            let unbias = cnt / (cnt - one);
            for ch in 0..c {
                let rm = &mut self.running_mean.data_mut()[ch];
                *rm = (one - self.momentum) * *rm + self.momentum * mean[ch];
                let rv = &mut self.running_var.data_mut()[ch];
                *rv = (one - self.momentum) * *rv + self.momentum * (var[ch] * unbias);
            }
            let inv_std: Vec<T> = var.iter().map(|&v| one / (v + self.epsilon).sqrt()).collect();
            (mean, inv_std)
        } else {
            let inv_std = self
                .running_var
                .data()
                .iter()
                .map(|&v| T::one() / (v + self.epsilon).sqrt())
                .collect();
            (self.running_mean.data().to_vec(), inv_std)
        };

        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        let mut normalized = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    normalized[i] = xh;
                    out[i] = gamma[ch] * xh + beta[ch];
                }
            }
        }
        let out = Tensor::new(input.shape().to_vec(), out)?;
        out.ensure_finite("batch norm output")?;
        self.cache = keep_cache.then(|| BnCache {
            normalized: Tensor::new(input.shape().to_vec(), normalized).expect("same shape"),
            inv_std,
            batch_stats,
        });
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>, need_input_grad: bool) -> Result<Option<Tensor<T>>> {
        let cache = self.cache.as_ref().ok_or(Error::BackwardWithoutForward)?;
        grad_out.ensure_shape(cache.normalized.shape(), "batch norm output gradient")?;
        let [n, c, h, w] = check_rank4(grad_out, "batch norm output gradient")?;
        let plane = h * w;
        let dy = grad_out.data();
        let xh = cache.normalized.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    dgamma[ch] = dgamma[ch] + dy[i] * xh[i];
                    dbeta[ch] = dbeta[ch] + dy[i];
                }
            }
        }
        let grad_in = if need_input_grad {
            let gamma = self.gamma.value.data();
            let mut dx = vec![T::zero(); dy.len()];
            if cache.batch_stats {
                let m = T::from_usize(n * plane).expect("count fits");
                for ch in 0..c {
                    // dxhat = dy·γ; dx = inv_std/m · (m·dxhat − Σdxhat − x̂·Σ(dxhat·x̂))
                    let sum_dxh = dbeta[ch] * gamma[ch];
                    let sum_dxh_xh = dgamma[ch] * gamma[ch];
                    let scale = cache.inv_std[ch] / m;
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        for i in off..off + plane {
                            let dxh = dy[i] * gamma[ch];
                            dx[i] = scale * (m * dxh - sum_dxh - xh[i] * sum_dxh_xh);
                        }
                    }
                }
            } else {
                for b in 0..n {
                    for ch in 0..c {
                        let s = gamma[ch] * cache.inv_std[ch];
                        let off = (b * c + ch) * plane;
                        for i in off..off + plane {
                            dx[i] = dy[i] * s;
                        }
                    }
                }
            }
            Some(Tensor::new(grad_out.shape().to_vec(), dx)?)
        } else {
            None
        };
        if self.gamma.trainable {
            self.gamma.set_grad(Tensor::new(vec![c], dgamma)?)?;
        }
        if self.beta.trainable {
            self.beta.set_grad(Tensor::new(vec![c], dbeta)?)?;
        }
        Ok(grad_in)
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn parameters_mut(&mut self) -> Vec<(&'static str, &mut Parameter<T>)> {
        vec![("weight", &mut self.gamma), ("bias", &mut self.beta)]
    }
}
