//! Mean pooling and bilinear ("general") attention over example encodings.

use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::{join, softmax, softmax_backward, uniform_array2, Params, Real};
use crate::error::{Error, Result};

/// Arithmetic mean of the rows of `vectors`.
pub fn mean_pool<T: Real>(vectors: ArrayView2<'_, T>) -> Result<Array1<T>> {
    vectors
        .mean_axis(Axis(0))
        .ok_or(Error::EmptyInput("mean pool"))
}

/// Bilinear attention parameters: `score(h, e) = hᵀ W e`.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    /// Shape `d_en x d_wc`.
    pub w: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    queries: Array2<T>,
    examples: Array2<T>,
    projected: Array2<T>,
    weights: Array2<T>,
}

impl<T: Real> AttentionCache<T> {
    /// Attention weights, one row per query.
    pub fn weights(&self) -> &Array2<T> {
        &self.weights
    }
}

impl<T: Real> Attention<T> {
    pub fn new<R: Rng>(query_dim: usize, key_dim: usize, init_scale: f64, rng: &mut R) -> Self {
        Attention {
            w: uniform_array2(query_dim, key_dim, init_scale, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Attention {
            w: Array2::zeros(self.w.raw_dim()),
        }
    }

    /// For each query row `h_i`, softmax over `h_iᵀ W e_k` and the weighted
    /// sum of example rows. Returns the `queries x key_dim` contexts.
    pub fn forward(
        &self,
        queries: ArrayView2<'_, T>,
        examples: ArrayView2<'_, T>,
    ) -> Result<(Array2<T>, AttentionCache<T>)> {
        if examples.nrows() == 0 {
            return Err(Error::EmptyExamples);
        }
        if queries.ncols() != self.w.nrows() || examples.ncols() != self.w.ncols() {
            return Err(Error::Shape(format!(
                "attention expects {}x{} operands, got queries of width {} and examples of width {}",
                self.w.nrows(),
                self.w.ncols(),
                queries.ncols(),
                examples.ncols()
            )));
        }
        // projected[k] = W e_k
        let projected = examples.dot(&self.w.t());
        let scores = queries.dot(&projected.t());
        let mut weights = Array2::zeros(scores.raw_dim());
        for (mut row, s) in weights.outer_iter_mut().zip(scores.outer_iter()) {
            row.assign(&softmax(s));
        }
        let context = weights.dot(&examples);
        Ok((
            context,
            AttentionCache {
                queries: queries.to_owned(),
                examples: examples.to_owned(),
                projected,
                weights,
            },
        ))
    }

    /// Returns `(d_queries, d_examples)` and accumulates `dW`.
    pub fn backward(
        &self,
        cache: &AttentionCache<T>,
        d_context: ArrayView2<'_, T>,
        grads: &mut Self,
    ) -> (Array2<T>, Array2<T>) {
        let d_weights = d_context.dot(&cache.examples.t());
        let mut d_examples = cache.weights.t().dot(&d_context);
        let mut d_scores = Array2::zeros(d_weights.raw_dim());
        for ((mut ds, p), dp) in d_scores
            .outer_iter_mut()
            .zip(cache.weights.outer_iter())
            .zip(d_weights.outer_iter())
        {
            ds.assign(&softmax_backward(p, dp));
        }
        let d_queries = d_scores.dot(&cache.projected);
        let d_projected = d_scores.t().dot(&cache.queries);
        grads.w += &d_projected.t().dot(&cache.examples);
        d_examples += &d_projected.dot(&self.w);
        (d_queries, d_examples)
    }

    pub fn cast<U: Real>(&self) -> Attention<U> {
        Attention {
            w: self.w.mapv(|v| U::lit(v.as_f64())),
        }
    }
}

/// Single-query convenience form: returns the weights over the examples and
/// the attended context vector.
pub fn attend<T: Real>(
    attention: &Attention<T>,
    query: &Array1<T>,
    examples: ArrayView2<'_, T>,
) -> Result<(Array1<T>, Array1<T>)> {
    let queries = query.view().insert_axis(Axis(0));
    let (context, cache) = attention.forward(queries, examples)?;
    Ok((cache.weights.row(0).to_owned(), context.row(0).to_owned()))
}

impl<T: Real> Params<T> for Attention<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        out.push((join(prefix, "w"), self.w.view().into_dyn()));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        out.push((join(prefix, "w"), self.w.view_mut().into_dyn()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_params, finite_difference, relative_error};
    use crate::nn::uniform_array1;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mean_pool_cases() {
        let v = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(mean_pool(v.view()).unwrap(), array![0.5, 0.5]);
        let one = array![[3.0, -1.0]];
        assert_eq!(mean_pool(one.view()).unwrap(), array![3.0, -1.0]);
        let copies = array![[0.25, 2.0], [0.25, 2.0], [0.25, 2.0]];
        assert_eq!(mean_pool(copies.view()).unwrap(), array![0.25, 2.0]);
        assert!(matches!(
            mean_pool(Array2::<f64>::zeros((0, 2)).view()),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn singleton_and_identical_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let att = Attention::<f64>::new(4, 5, 1.0, &mut rng);
        let h = uniform_array1(4, 1.0, &mut rng);
        let e = uniform_array2::<f64, _>(1, 5, 1.0, &mut rng);
        let (alpha, ctx) = attend(&att, &h, e.view()).unwrap();
        assert_eq!(alpha, array![1.0]);
        assert_eq!(ctx, e.row(0));

        let same = ndarray::concatenate(Axis(0), &[e.view(), e.view(), e.view()]).unwrap();
        let (alpha, _) = attend(&att, &h, same.view()).unwrap();
        for a in alpha {
            assert!((a - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!(matches!(
            attend(&att, &h, Array2::zeros((0, 5)).view()),
            Err(Error::EmptyExamples)
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let att = Attention::<f64>::new(4, 5, 1.0, &mut rng);
            let queries = uniform_array2::<f64, _>(3, 4, 1.0, &mut rng);
            let examples = uniform_array2::<f64, _>(2, 5, 1.0, &mut rng);
            let probe = uniform_array2::<f64, _>(3, 5, 1.0, &mut rng);
            let loss = |a: &Attention<f64>, q: &Array2<f64>, e: &Array2<f64>| {
                (a.forward(q.view(), e.view()).unwrap().0 * &probe).sum()
            };

            let (_, cache) = att.forward(queries.view(), examples.view()).unwrap();
            let mut grads = att.zeros_like();
            let (dq, de) = att.backward(&cache, probe.view(), &mut grads);
            check_params(&att, &grads, |a| loss(a, &queries, &examples), 1e-6, 1e-4);
            let nq = finite_difference(&queries, |q| loss(&att, q, &examples), 1e-6);
            let ne = finite_difference(&examples, |e| loss(&att, &queries, e), 1e-6);
            assert!(relative_error(dq.view().into_dyn(), nq.view().into_dyn()) < 1e-4);
            assert!(relative_error(de.view().into_dyn(), ne.view().into_dyn()) < 1e-4);
        }
    }
}
