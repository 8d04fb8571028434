//! Per-token affine layer followed by softmax over the three IOB classes.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::{join, softmax, uniform_array1, uniform_array2, Params, Real};
use crate::error::{Error, Result};

pub const NUM_TAGS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T> {
    /// Shape `3 x d_en`.
    pub w: Array2<T>,
    pub b: Array1<T>,
}

impl<T: Real> Classifier<T> {
    pub fn new<R: Rng>(input_dim: usize, init_scale: f64, rng: &mut R) -> Self {
        Classifier {
            w: uniform_array2(NUM_TAGS, input_dim, init_scale, rng),
            b: uniform_array1(NUM_TAGS, init_scale, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Classifier {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    /// Row-wise probabilities for a `T x d_en` input.
    pub fn forward(&self, inputs: ArrayView2<'_, T>) -> Result<Array2<T>> {
        if inputs.ncols() != self.w.ncols() {
            return Err(Error::Shape(format!(
                "classifier expects width {}, got {}",
                self.w.ncols(),
                inputs.ncols()
            )));
        }
        let logits = inputs.dot(&self.w.t()) + &self.b;
        let mut probs = Array2::zeros(logits.raw_dim());
        for (mut p, l) in probs.outer_iter_mut().zip(logits.outer_iter()) {
            p.assign(&softmax(l));
        }
        Ok(probs)
    }

    /// Takes `dL/dlogits` and returns `dL/dinputs`.
    pub fn backward(
        &self,
        inputs: ArrayView2<'_, T>,
        d_logits: ArrayView2<'_, T>,
        grads: &mut Self,
    ) -> Array2<T> {
        grads.w += &d_logits.t().dot(&inputs);
        grads.b += &d_logits.sum_axis(Axis(0));
        d_logits.dot(&self.w)
    }

    pub fn cast<U: Real>(&self) -> Classifier<U> {
        Classifier {
            w: self.w.mapv(|v| U::lit(v.as_f64())),
            b: self.b.mapv(|v| U::lit(v.as_f64())),
        }
    }
}

/// `softmax(W x + b)` for a single vector.
pub fn classify<T: Real>(classifier: &Classifier<T>, x: ArrayView1<'_, T>) -> Result<Array1<T>> {
    let probs = classifier.forward(x.insert_axis(Axis(0)))?;
    Ok(probs.row(0).to_owned())
}

impl<T: Real> Params<T> for Classifier<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        out.push((join(prefix, "w"), self.w.view().into_dyn()));
        out.push((join(prefix, "b"), self.b.view().into_dyn()));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        out.push((join(prefix, "w"), self.w.view_mut().into_dyn()));
        out.push((join(prefix, "b"), self.b.view_mut().into_dyn()));
    }
}
