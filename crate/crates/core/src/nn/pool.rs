use crate::error::{Error, Result};
use crate::nn::check_rank4;
use crate::tensor::{Scalar, Tensor};

/// Non-overlapping max pooling; trailing rows/columns that do not fill a
/// window are dropped. Gradients route to the first maximal element.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub window: usize,
    argmax: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(window: usize) -> Self {
        Self { window, argmax: None }
    }

    pub fn output_extent(&self, extent: usize) -> usize {
        extent / self.window
    }

    pub fn forward<T: Scalar>(&mut self, input: &Tensor<T>, keep_cache: bool) -> Result<Tensor<T>> {
        let [n, c, h, w] = check_rank4(input, "max pool input")?;
        let k = self.window;
        let (oh, ow) = (h / k, w / k);
        if oh == 0 || ow == 0 {
            return Err(Error::Shape(format!("pool window {k} exceeds {h}×{w} input")));
        }
        let x = input.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut arg = Vec::with_capacity(if keep_cache { n * c * oh * ow } else { 0 });
        for plane in 0..n * c {
            let base = plane * h * w;
            for r in 0..oh {
                for col in 0..ow {
                    let mut best = base + r * k * w + col * k;
                    for i in 0..k {
                        for j in 0..k {
                            let idx = base + (r * k + i) * w + col * k + j;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    if keep_cache {
                        arg.push(best);
                    }
                }
            }
        }
        self.argmax = keep_cache.then(|| (arg, input.shape().to_vec()));
        Tensor::new(vec![n, c, oh, ow], out)
    }

    pub fn backward<T: Scalar>(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (arg, in_shape) = self.argmax.as_ref().ok_or(Error::BackwardWithoutForward)?;
        if grad_out.numel() != arg.len() {
            return Err(Error::Shape("max pool output gradient does not match forward".into()));
        }
        let mut dx = vec![T::zero(); in_shape.iter().product()];
        for (&i, &g) in arg.iter().zip(grad_out.data()) {
            dx[i] = dx[i] + g;
        }
        Tensor::new(in_shape.clone(), dx)
    }

    pub(crate) fn clear_cache(&mut self) {
        self.argmax = None;
    }
}
