use crate::error::{Error, Result};
use crate::nn::Parameter;
use crate::tensor::{Scalar, Tensor};

/// Fully-connected layer `y = x·Wᵀ + b` with `W` of shape out×in.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (out, _) = match *weight.shape() {
            [o, i] => (o, i),
            _ => {
                return Err(Error::Shape(format!(
                    "linear weight must be 2-D, got {:?}",
                    weight.shape()
                )))
            }
        };
        bias.ensure_shape(&[out], "linear bias")?;
        Ok(Self {
            weight: Parameter::new(weight),
            bias: Parameter::new(bias),
            input: None,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&mut self, input: &Tensor<T>, keep_cache: bool) -> Result<Tensor<T>> {
        let (n, f) = match *input.shape() {
            [n, f] => (n, f),
            _ => {
                return Err(Error::Shape(format!(
                    "linear input must be 2-D, got {:?}",
                    input.shape()
                )))
            }
        };
        if f != self.in_features() {
            return Err(Error::Shape(format!(
                "linear layer expects {} features, got {f}",
                self.in_features()
            )));
        }
        let o = self.out_features();
        let w = self.weight.value.data();
        let b = self.bias.value.data();
        let x = input.data();
        let mut out = Vec::with_capacity(n * o);
        for row in x.chunks_exact(f) {
            for (j, wrow) in w.chunks_exact(f).enumerate() {
                let dot = row.iter().zip(wrow).fold(T::zero(), |acc, (&a, &bb)| acc + a * bb);
                out.push(dot + b[j]);
            }
        }
        self.input = keep_cache.then(|| input.clone());
        let out = Tensor::new(vec![n, o], out)?;
        out.ensure_finite("linear output")?;
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>, need_input_grad: bool) -> Result<Option<Tensor<T>>> {
        let input = self.input.as_ref().ok_or(Error::BackwardWithoutForward)?;
        let n = input.shape()[0];
        let (f, o) = (self.in_features(), self.out_features());
        grad_out.ensure_shape(&[n, o], "linear output gradient")?;
        let x = input.data();
        let dy = grad_out.data();
        if self.weight.trainable || self.bias.trainable {
            let mut dw = vec![T::zero(); o * f];
            let mut db = vec![T::zero(); o];
            for (xrow, grow) in x.chunks_exact(f).zip(dy.chunks_exact(o)) {
                for j in 0..o {
                    db[j] = db[j] + grow[j];
                    let dst = &mut dw[j * f..][..f];
                    for (d, &xv) in dst.iter_mut().zip(xrow) {
                        *d = *d + grow[j] * xv;
                    }
                }
            }
            if self.weight.trainable {
                self.weight.set_grad(Tensor::new(vec![o, f], dw)?)?;
            }
            if self.bias.trainable {
                self.bias.set_grad(Tensor::new(vec![o], db)?)?;
            }
        }
        if !need_input_grad {
            return Ok(None);
        }
        let w = self.weight.value.data();
        let mut dx = vec![T::zero(); n * f];
        for (dxrow, grow) in dx.chunks_exact_mut(f).zip(dy.chunks_exact(o)) {
            for j in 0..o {
                for (d, &wv) in dxrow.iter_mut().zip(&w[j * f..][..f]) {
                    *d = *d + grow[j] * wv;
                }
            }
        }
        Ok(Some(Tensor::new(vec![n, f], dx)?))
    }

    pub(crate) fn clear_cache(&mut self) {
        self.input = None;
    }

    pub fn parameters_mut(&mut self) -> Vec<(&'static str, &mut Parameter<T>)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}
