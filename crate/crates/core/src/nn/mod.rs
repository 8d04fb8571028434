//! Small trainable layer library with hand-written backward passes.
//!
//! Every layer follows the same pattern: `forward` returns the output plus a
//! cache, and `backward` consumes the cache and an upstream gradient,
//! accumulates parameter gradients into a same-shaped gradient struct and
//! returns the gradient with respect to the layer input. Layers are generic
//! over [`Real`] so training runs in `f32` and gradient checks in `f64`.

pub mod adam;
pub mod attention;
pub mod checkpoint;
pub mod classifier;
pub mod embedding;
pub mod gradcheck;
pub mod rnn;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{Array1, ArrayView1, ArrayViewD, ArrayViewMutD, NdFloat};
use num_traits::FromPrimitive;
use rand::Rng;

pub use adam::{Adam, AdamConfig};
pub use attention::{attend, mean_pool, Attention};
pub use checkpoint::{read_checkpoint, write_checkpoint, NamedArray};
pub use classifier::{classify, Classifier};
pub use embedding::{CharCnn, WordEmbeddingTable, VAL_TOKEN};
pub use rnn::{BiRnn, GruCell, LstmCell, RecurrentCell};

/// Floating-point element type for parameters and activations.
pub trait Real: NdFloat + FromPrimitive + Sum + Debug + Display + Default {
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite value")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// A collection of named parameter arrays. Gradient structs are values of
/// the same type, so the two enumerations line up element for element.
pub trait Params<T: Real> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>);

    fn arrays(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn arrays_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    fn num_parameters(&self) -> usize {
        self.arrays().iter().map(|(_, a)| a.len()).sum()
    }

    /// `self += other`, array by array.
    fn add_assign_from(&mut self, other: &Self) {
        let src = other.arrays();
        for ((_, mut dst), (_, src)) in self.arrays_mut().into_iter().zip(src) {
            dst += &src;
        }
    }

    fn scale(&mut self, factor: T) {
        for (_, mut a) in self.arrays_mut() {
            a.mapv_inplace(|v| v * factor);
        }
    }

    fn fill_zero(&mut self) {
        for (_, mut a) in self.arrays_mut() {
            a.fill(T::zero());
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn uniform_array2<T: Real, R: Rng>(
    rows: usize,
    cols: usize,
    scale: f64,
    rng: &mut R,
) -> ndarray::Array2<T> {
    ndarray::Array2::from_shape_fn((rows, cols), |_| T::lit(rng.gen_range(-scale..scale)))
}

pub(crate) fn uniform_array1<T: Real, R: Rng>(len: usize, scale: f64, rng: &mut R) -> Array1<T> {
    Array1::from_shape_fn(len, |_| T::lit(rng.gen_range(-scale..scale)))
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Max-subtracted softmax.
pub fn softmax<T: Real>(scores: ArrayView1<'_, T>) -> Array1<T> {
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out = scores.mapv(|s| (s - max).exp());
    let total = out.sum();
    out.mapv_inplace(|v| v / total);
    out
}

/// Backward of softmax: given `p = softmax(s)` and `dL/dp`, returns `dL/ds`.
pub fn softmax_backward<T: Real>(probs: ArrayView1<'_, T>, grad: ArrayView1<'_, T>) -> Array1<T> {
    let dot = probs.dot(&grad);
    Array1::from_shape_fn(probs.len(), |k| probs[k] * (grad[k] - dot))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_is_shift_invariant() {
        let s = array![0.3f64, -1.2, 2.0, 0.0];
        let shifted = s.mapv(|v| v + 100.0);
        let a = softmax(s.view());
        let b = softmax(shifted.view());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.sum() - 1.0).abs() < 1e-12);
        assert!(a.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn sigmoid_is_stable() {
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!((sigmoid(800.0f64) - 1.0).abs() < 1e-15);
    }
}
