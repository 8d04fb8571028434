//! Adam with bias correction.

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::checkpoint::NamedArray;
use super::{Params, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    names: Vec<String>,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new<P: Params<T>>(config: AdamConfig, params: &P) -> Self {
        let arrays = params.arrays();
        Adam {
            config,
            step: 0,
            names: arrays.iter().map(|(n, _)| n.clone()).collect(),
            m: arrays
                .iter()
                .map(|(_, a)| ArrayD::zeros(a.raw_dim()))
                .collect(),
            v: arrays
                .iter()
                .map(|(_, a)| ArrayD::zeros(a.raw_dim()))
                .collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. A non-finite gradient aborts before anything is
    /// modified.
    pub fn step<P: Params<T>>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let grads = grads.arrays();
        if grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} arrays, got {} gradients",
                self.m.len(),
                grads.len()
            )));
        }
        if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteGradient {
                param: name.clone(),
                step: self.step + 1,
            });
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = T::lit(1.0 - beta1.powi(t));
        let bc2 = T::lit(1.0 - beta2.powi(t));
        let (b1, b2, lr, eps) = (T::lit(beta1), T::lit(beta2), T::lit(lr), T::lit(eps));
        let one = T::one();
        for (idx, (name, mut param)) in params.arrays_mut().into_iter().enumerate() {
            debug_assert_eq!(name, self.names[idx]);
            let g = &grads[idx].1;
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            ndarray::Zip::from(&mut param)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }

    /// Moment arrays for checkpointing (`m.<name>` then `v.<name>`).
    pub fn state_arrays(&self) -> Vec<NamedArray> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (prefix, arrays) in [("m", &self.m), ("v", &self.v)] {
            for (name, a) in self.names.iter().zip(arrays) {
                out.push(NamedArray::from_view(format!("{prefix}.{name}"), a.view()));
            }
        }
        out
    }

    pub fn restore(&mut self, step: u64, arrays: &[NamedArray]) -> Result<()> {
        let n = self.m.len();
        if arrays.len() != 2 * n {
            return Err(Error::Checkpoint(format!(
                "expected {} optimizer arrays, found {}",
                2 * n,
                arrays.len()
            )));
        }
        for (i, name) in self.names.iter().enumerate() {
            for (slot, stored, prefix) in [
                (&mut self.m[i], &arrays[i], "m"),
                (&mut self.v[i], &arrays[n + i], "v"),
            ] {
                if stored.name != format!("{prefix}.{name}") || stored.shape != slot.shape() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer array `{}` does not match `{prefix}.{name}`",
                        stored.name
                    )));
                }
                *slot = ArrayD::from_shape_vec(
                    IxDyn(&stored.shape),
                    stored.data.iter().map(|&v| T::lit(v as f64)).collect(),
                )
                .expect("shape checked");
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::join;
    use ndarray::{array, Array1, ArrayViewD, ArrayViewMutD};

    #[derive(Clone)]
    struct Scalar(Array1<f64>);

    impl Params<f64> for Scalar {
        fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, f64>)>) {
            out.push((join(prefix, "theta"), self.0.view().into_dyn()));
        }
        fn visit_mut<'a>(
            &'a mut self,
            prefix: &str,
            out: &mut Vec<(String, ArrayViewMutD<'a, f64>)>,
        ) {
            out.push((join(prefix, "theta"), self.0.view_mut().into_dyn()));
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = Scalar(array![0.3, -1.0]);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.step(&mut p, &Scalar(array![0.0, 0.0])).unwrap();
        assert_eq!(p.0, array![0.3, -1.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Scalar(array![1.0, 1.0]);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.step(&mut p, &Scalar(array![0.5, -7.0])).unwrap();
        assert!((p.0[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p.0[1] - (1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut p = Scalar(array![1.0]);
        let cfg = AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &p);
        for _ in 0..500 {
            let g = Scalar(p.0.mapv(|t| 2.0 * t));
            opt.step(&mut p, &g).unwrap();
        }
        assert!(p.0[0].abs() < 1e-2, "theta = {}", p.0[0]);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = Scalar(array![1.0]);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        let err = opt.step(&mut p, &Scalar(array![f64::NAN])).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { step: 1, .. }));
        assert_eq!(p.0, array![1.0]);
        assert_eq!(opt.steps_taken(), 0);
    }
}
