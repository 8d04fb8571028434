//! GRU and LSTM cells and their bidirectional wrapper.
//!
//! Sequences are `T x input_dim` matrices. Input projections for all time
//! steps are computed as one matrix product; only the recurrent part runs
//! step by step. Initial hidden and cell states are zero.

use ndarray::linalg::general_mat_mul;
use ndarray::{
    concatenate, s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis,
};
use rand::Rng;

use super::{join, sigmoid, uniform_array1, uniform_array2, Params, Real};
use crate::error::{Error, Result};

/// One direction of a recurrent layer.
pub trait RecurrentCell: Params<Self::Scalar> + Clone {
    type Scalar: Real;
    type Cache;

    fn input_dim(&self) -> usize;
    fn hidden_dim(&self) -> usize;
    fn zeros_like(&self) -> Self;

    /// Runs the cell over `inputs`, right to left when `reverse`. Row `t` of
    /// the output is the state after consuming position `t`.
    fn forward_seq(
        &self,
        inputs: ArrayView2<'_, Self::Scalar>,
        reverse: bool,
    ) -> (Array2<Self::Scalar>, Self::Cache);

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the inputs.
    fn backward_seq(
        &self,
        cache: &Self::Cache,
        d_out: ArrayView2<'_, Self::Scalar>,
        grads: &mut Self,
    ) -> Array2<Self::Scalar>;
}

fn order(len: usize, reverse: bool) -> Vec<usize> {
    if reverse {
        (0..len).rev().collect()
    } else {
        (0..len).collect()
    }
}

fn add_mat_vec<T: Real>(acc: &mut Array1<T>, m: ArrayView2<'_, T>, v: ArrayView1<'_, T>) {
    *acc += &m.dot(&v);
}

/// Gated recurrent unit:
///
/// ```text
/// z = σ(W_z x + U_z h' + b_z)
/// r = σ(W_r x + U_r h' + b_r)
/// c = tanh(W_c x + U_c (r ⊙ h') + b_c)
/// h = (1 - z) ⊙ h' + z ⊙ c
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell<T> {
    /// `[W_z; W_r; W_c]`, shape `3H x input`.
    pub w_x: Array2<T>,
    /// `[U_z; U_r]`, shape `2H x H`.
    pub u_zr: Array2<T>,
    pub u_c: Array2<T>,
    pub bias: Array1<T>,
}

#[derive(Debug, Clone)]
pub struct GruCache<T> {
    inputs: Array2<T>,
    reverse: bool,
    h_prev: Array2<T>,
    z: Array2<T>,
    r: Array2<T>,
    cand: Array2<T>,
}

impl<T: Real> GruCell<T> {
    pub fn new<R: Rng>(input_dim: usize, hidden: usize, init_scale: f64, rng: &mut R) -> Self {
        GruCell {
            w_x: uniform_array2(3 * hidden, input_dim, init_scale, rng),
            u_zr: uniform_array2(2 * hidden, hidden, init_scale, rng),
            u_c: uniform_array2(hidden, hidden, init_scale, rng),
            bias: uniform_array1(3 * hidden, init_scale, rng),
        }
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        GruCell {
            w_x: Array2::zeros((3 * hidden, input_dim)),
            u_zr: Array2::zeros((2 * hidden, hidden)),
            u_c: Array2::zeros((hidden, hidden)),
            bias: Array1::zeros(3 * hidden),
        }
    }
}

impl<T: Real> Params<T> for GruCell<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        out.push((join(prefix, "w_x"), self.w_x.view().into_dyn()));
        out.push((join(prefix, "u_zr"), self.u_zr.view().into_dyn()));
        out.push((join(prefix, "u_c"), self.u_c.view().into_dyn()));
        out.push((join(prefix, "bias"), self.bias.view().into_dyn()));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        out.push((join(prefix, "w_x"), self.w_x.view_mut().into_dyn()));
        out.push((join(prefix, "u_zr"), self.u_zr.view_mut().into_dyn()));
        out.push((join(prefix, "u_c"), self.u_c.view_mut().into_dyn()));
        out.push((join(prefix, "bias"), self.bias.view_mut().into_dyn()));
    }
}

impl<T: Real> RecurrentCell for GruCell<T> {
    type Scalar = T;
    type Cache = GruCache<T>;

    fn input_dim(&self) -> usize {
        self.w_x.ncols()
    }

    fn hidden_dim(&self) -> usize {
        self.u_c.nrows()
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.hidden_dim())
    }

    fn forward_seq(&self, inputs: ArrayView2<'_, T>, reverse: bool) -> (Array2<T>, GruCache<T>) {
        let len = inputs.nrows();
        let hd = self.hidden_dim();
        let proj = inputs.dot(&self.w_x.t()) + &self.bias;
        let mut out = Array2::zeros((len, hd));
        let mut cache = GruCache {
            inputs: inputs.to_owned(),
            reverse,
            h_prev: Array2::zeros((len, hd)),
            z: Array2::zeros((len, hd)),
            r: Array2::zeros((len, hd)),
            cand: Array2::zeros((len, hd)),
        };
        let mut h = Array1::<T>::zeros(hd);
        for t in order(len, reverse) {
            cache.h_prev.row_mut(t).assign(&h);
            let mut zr = proj.slice(s![t, ..2 * hd]).to_owned();
            add_mat_vec(&mut zr, self.u_zr.view(), h.view());
            let z = zr.slice(s![..hd]).mapv(sigmoid);
            let r = zr.slice(s![hd..]).mapv(sigmoid);
            let rh = &r * &h;
            let mut c = proj.slice(s![t, 2 * hd..]).to_owned();
            add_mat_vec(&mut c, self.u_c.view(), rh.view());
            c.mapv_inplace(T::tanh);
            h = Array1::from_shape_fn(hd, |j| (T::one() - z[j]) * h[j] + z[j] * c[j]);
            out.row_mut(t).assign(&h);
            cache.z.row_mut(t).assign(&z);
            cache.r.row_mut(t).assign(&r);
            cache.cand.row_mut(t).assign(&c);
        }
        (out, cache)
    }

    fn backward_seq(
        &self,
        cache: &GruCache<T>,
        d_out: ArrayView2<'_, T>,
        grads: &mut Self,
    ) -> Array2<T> {
        let len = d_out.nrows();
        let hd = self.hidden_dim();
        let one = T::one();
        let mut d_proj = Array2::<T>::zeros((len, 3 * hd));
        let mut rh_all = Array2::<T>::zeros((len, hd));
        let mut dh_next = Array1::<T>::zeros(hd);
        for t in order(len, cache.reverse).into_iter().rev() {
            let dh = &d_out.row(t) + &dh_next;
            let hp = cache.h_prev.row(t);
            let z = cache.z.row(t);
            let r = cache.r.row(t);
            let c = cache.cand.row(t);
            let da_c = Array1::from_shape_fn(hd, |j| dh[j] * z[j] * (one - c[j] * c[j]));
            let dz = Array1::from_shape_fn(hd, |j| dh[j] * (c[j] - hp[j]));
            let mut dhp = Array1::from_shape_fn(hd, |j| dh[j] * (one - z[j]));
            let d_rh = self.u_c.t().dot(&da_c);
            let da_z = Array1::from_shape_fn(hd, |j| dz[j] * z[j] * (one - z[j]));
            let da_r = Array1::from_shape_fn(hd, |j| d_rh[j] * hp[j] * r[j] * (one - r[j]));
            dhp += &(&d_rh * &r);
            let mut row = d_proj.row_mut(t);
            row.slice_mut(s![..hd]).assign(&da_z);
            row.slice_mut(s![hd..2 * hd]).assign(&da_r);
            row.slice_mut(s![2 * hd..]).assign(&da_c);
            dhp += &self.u_zr.t().dot(&d_proj.slice(s![t, ..2 * hd]));
            rh_all.row_mut(t).assign(&(&r * &hp));
            dh_next = dhp;
        }
        let d_zr = d_proj.slice(s![.., ..2 * hd]);
        let d_c = d_proj.slice(s![.., 2 * hd..]);
        general_mat_mul(
            T::one(),
            &d_zr.t(),
            &cache.h_prev,
            T::one(),
            &mut grads.u_zr,
        );
        general_mat_mul(T::one(), &d_c.t(), &rh_all, T::one(), &mut grads.u_c);
        general_mat_mul(
            T::one(),
            &d_proj.t(),
            &cache.inputs,
            T::one(),
            &mut grads.w_x,
        );
        grads.bias += &d_proj.sum_axis(Axis(0));
        d_proj.dot(&self.w_x)
    }
}

/// Long short-term memory cell without peepholes; gate order `i, f, g, o`.
///
/// ```text
/// c = f ⊙ c' + i ⊙ g
/// h = o ⊙ tanh(c)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell<T> {
    /// Shape `4H x input`.
    pub w_x: Array2<T>,
    /// Shape `4H x H`.
    pub u: Array2<T>,
    pub bias: Array1<T>,
}

#[derive(Debug, Clone)]
pub struct LstmCache<T> {
    inputs: Array2<T>,
    reverse: bool,
    h_prev: Array2<T>,
    c_prev: Array2<T>,
    gates: Array2<T>,
    tanh_c: Array2<T>,
}

impl<T: Real> LstmCell<T> {
    pub fn new<R: Rng>(input_dim: usize, hidden: usize, init_scale: f64, rng: &mut R) -> Self {
        LstmCell {
            w_x: uniform_array2(4 * hidden, input_dim, init_scale, rng),
            u: uniform_array2(4 * hidden, hidden, init_scale, rng),
            bias: uniform_array1(4 * hidden, init_scale, rng),
        }
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        LstmCell {
            w_x: Array2::zeros((4 * hidden, input_dim)),
            u: Array2::zeros((4 * hidden, hidden)),
            bias: Array1::zeros(4 * hidden),
        }
    }
}

impl<T: Real> Params<T> for LstmCell<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        out.push((join(prefix, "w_x"), self.w_x.view().into_dyn()));
        out.push((join(prefix, "u"), self.u.view().into_dyn()));
        out.push((join(prefix, "bias"), self.bias.view().into_dyn()));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        out.push((join(prefix, "w_x"), self.w_x.view_mut().into_dyn()));
        out.push((join(prefix, "u"), self.u.view_mut().into_dyn()));
        out.push((join(prefix, "bias"), self.bias.view_mut().into_dyn()));
    }
}

impl<T: Real> RecurrentCell for LstmCell<T> {
    type Scalar = T;
    type Cache = LstmCache<T>;

    fn input_dim(&self) -> usize {
        self.w_x.ncols()
    }

    fn hidden_dim(&self) -> usize {
        self.u.ncols()
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.hidden_dim())
    }

    fn forward_seq(&self, inputs: ArrayView2<'_, T>, reverse: bool) -> (Array2<T>, LstmCache<T>) {
        let len = inputs.nrows();
        let hd = self.hidden_dim();
        let proj = inputs.dot(&self.w_x.t()) + &self.bias;
        let mut out = Array2::zeros((len, hd));
        let mut cache = LstmCache {
            inputs: inputs.to_owned(),
            reverse,
            h_prev: Array2::zeros((len, hd)),
            c_prev: Array2::zeros((len, hd)),
            gates: Array2::zeros((len, 4 * hd)),
            tanh_c: Array2::zeros((len, hd)),
        };
        let mut h = Array1::<T>::zeros(hd);
        let mut c = Array1::<T>::zeros(hd);
        for t in order(len, reverse) {
            cache.h_prev.row_mut(t).assign(&h);
            cache.c_prev.row_mut(t).assign(&c);
            let mut a = proj.row(t).to_owned();
            add_mat_vec(&mut a, self.u.view(), h.view());
            for (k, v) in a.iter_mut().enumerate() {
                *v = if (2 * hd..3 * hd).contains(&k) {
                    v.tanh()
                } else {
                    sigmoid(*v)
                };
            }
            for j in 0..hd {
                c[j] = a[hd + j] * c[j] + a[j] * a[2 * hd + j];
            }
            let tc = c.mapv(T::tanh);
            h = Array1::from_shape_fn(hd, |j| a[3 * hd + j] * tc[j]);
            out.row_mut(t).assign(&h);
            cache.gates.row_mut(t).assign(&a);
            cache.tanh_c.row_mut(t).assign(&tc);
        }
        (out, cache)
    }

    fn backward_seq(
        &self,
        cache: &LstmCache<T>,
        d_out: ArrayView2<'_, T>,
        grads: &mut Self,
    ) -> Array2<T> {
        let len = d_out.nrows();
        let hd = self.hidden_dim();
        let one = T::one();
        let mut d_proj = Array2::<T>::zeros((len, 4 * hd));
        let mut dh_next = Array1::<T>::zeros(hd);
        let mut dc_next = Array1::<T>::zeros(hd);
        for t in order(len, cache.reverse).into_iter().rev() {
            let g = cache.gates.row(t);
            let tc = cache.tanh_c.row(t);
            let cp = cache.c_prev.row(t);
            let mut row = d_proj.row_mut(t);
            for j in 0..hd {
                let dh = d_out[[t, j]] + dh_next[j];
                let (gi, gf, gg, go) = (g[j], g[hd + j], g[2 * hd + j], g[3 * hd + j]);
                let dc = dc_next[j] + dh * go * (one - tc[j] * tc[j]);
                row[j] = dc * gg * gi * (one - gi);
                row[hd + j] = dc * cp[j] * gf * (one - gf);
                row[2 * hd + j] = dc * gi * (one - gg * gg);
                row[3 * hd + j] = dh * tc[j] * go * (one - go);
                dc_next[j] = dc * gf;
            }
            dh_next = self.u.t().dot(&d_proj.row(t));
        }
        general_mat_mul(T::one(), &d_proj.t(), &cache.h_prev, T::one(), &mut grads.u);
        general_mat_mul(
            T::one(),
            &d_proj.t(),
            &cache.inputs,
            T::one(),
            &mut grads.w_x,
        );
        grads.bias += &d_proj.sum_axis(Axis(0));
        d_proj.dot(&self.w_x)
    }
}

/// Forward and backward cells whose states are concatenated per position.
#[derive(Debug, Clone, PartialEq)]
pub struct BiRnn<C> {
    pub fwd: C,
    pub bwd: C,
}

pub struct BiRnnCache<C: RecurrentCell> {
    fwd: C::Cache,
    bwd: C::Cache,
}

impl<C: RecurrentCell> BiRnn<C> {
    pub fn input_dim(&self) -> usize {
        self.fwd.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.fwd.hidden_dim() + self.bwd.hidden_dim()
    }

    pub fn zeros_like(&self) -> Self {
        BiRnn {
            fwd: self.fwd.zeros_like(),
            bwd: self.bwd.zeros_like(),
        }
    }

    pub fn forward(
        &self,
        inputs: ArrayView2<'_, C::Scalar>,
    ) -> Result<(Array2<C::Scalar>, BiRnnCache<C>)> {
        if inputs.nrows() == 0 {
            return Err(Error::EmptyInput("bidirectional RNN"));
        }
        if inputs.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "RNN expects inputs of width {}, got {}",
                self.input_dim(),
                inputs.ncols()
            )));
        }
        let (out_f, fwd) = self.fwd.forward_seq(inputs, false);
        let (out_b, bwd) = self.bwd.forward_seq(inputs, true);
        let out = concatenate(Axis(1), &[out_f.view(), out_b.view()]).expect("equal row counts");
        Ok((out, BiRnnCache { fwd, bwd }))
    }

    pub fn backward(
        &self,
        cache: &BiRnnCache<C>,
        d_out: ArrayView2<'_, C::Scalar>,
        grads: &mut Self,
    ) -> Array2<C::Scalar> {
        let split = self.fwd.hidden_dim();
        let mut dx =
            self.fwd
                .backward_seq(&cache.fwd, d_out.slice(s![.., ..split]), &mut grads.fwd);
        dx += &self
            .bwd
            .backward_seq(&cache.bwd, d_out.slice(s![.., split..]), &mut grads.bwd);
        dx
    }
}

impl<C: RecurrentCell> Params<C::Scalar> for BiRnn<C> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, C::Scalar>)>) {
        self.fwd.visit(&join(prefix, "fwd"), out);
        self.bwd.visit(&join(prefix, "bwd"), out);
    }

    fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, ArrayViewMutD<'a, C::Scalar>)>,
    ) {
        self.fwd.visit_mut(&join(prefix, "fwd"), out);
        self.bwd.visit_mut(&join(prefix, "bwd"), out);
    }
}

impl<T: Real> BiRnn<GruCell<T>> {
    pub fn gru<R: Rng>(input_dim: usize, output_dim: usize, init_scale: f64, rng: &mut R) -> Self {
        let hidden = output_dim / 2;
        BiRnn {
            fwd: GruCell::new(input_dim, hidden, init_scale, rng),
            bwd: GruCell::new(input_dim, hidden, init_scale, rng),
        }
    }
}

impl<T: Real> BiRnn<LstmCell<T>> {
    pub fn lstm<R: Rng>(input_dim: usize, output_dim: usize, init_scale: f64, rng: &mut R) -> Self {
        let hidden = output_dim / 2;
        BiRnn {
            fwd: LstmCell::new(input_dim, hidden, init_scale, rng),
            bwd: LstmCell::new(input_dim, hidden, init_scale, rng),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_params, finite_difference, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn weighted_sum(out: &Array2<f64>, weights: &Array2<f64>) -> f64 {
        (out * weights).sum()
    }

    fn check_birnn<C: RecurrentCell<Scalar = f64>>(net: BiRnn<C>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = uniform_array2::<f64, _>(3, net.input_dim(), 1.0, &mut rng);
        let weights = uniform_array2::<f64, _>(3, net.output_dim(), 1.0, &mut rng);
        let (_, cache) = net.forward(inputs.view()).unwrap();
        let mut grads = net.zeros_like();
        let dx = net.backward(&cache, weights.view(), &mut grads);

        let loss =
            |n: &BiRnn<C>, x: &Array2<f64>| weighted_sum(&n.forward(x.view()).unwrap().0, &weights);
        check_params(&net, &grads, |n| loss(n, &inputs), 1e-6, 1e-4);

        let numeric = finite_difference(&inputs, |x| loss(&net, x), 1e-6);
        assert!(relative_error(dx.view().into_dyn(), numeric.view().into_dyn()) < 1e-4);
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            check_birnn(BiRnn::<GruCell<f64>>::gru(5, 8, 0.5, &mut rng), seed);
        }
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            check_birnn(BiRnn::<LstmCell<f64>>::lstm(5, 8, 0.5, &mut rng), seed);
        }
    }

    #[test]
    fn single_step_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = BiRnn::<GruCell<f32>>::gru(160, 128, 0.1, &mut rng);
        let (out, _) = net.forward(Array2::zeros((1, 160)).view()).unwrap();
        assert_eq!(out.dim(), (1, 128));
    }

    #[test]
    fn zero_gru_is_a_fixed_point() {
        let net = BiRnn {
            fwd: GruCell::<f64>::zeros(4, 3),
            bwd: GruCell::<f64>::zeros(4, 3),
        };
        let (out, _) = net.forward(Array2::zeros((5, 4)).view()).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = BiRnn::<LstmCell<f64>>::lstm(4, 6, 0.1, &mut rng);
        assert!(matches!(
            net.forward(Array2::zeros((2, 3)).view()),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            net.forward(Array2::zeros((0, 4)).view()),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn output_lengths_follow_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = BiRnn::<LstmCell<f64>>::lstm(4, 6, 0.1, &mut rng);
        for len in 1..=32 {
            let (out, _) = net.forward(Array2::zeros((len, 4)).view()).unwrap();
            assert_eq!(out.dim(), (len, 6));
        }
    }
}
