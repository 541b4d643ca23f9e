use super::params::ParamStore;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Gradients are checked for finiteness before any
    /// parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        for (id, g) in store.ids().zip(grads) {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient {
                    param: store.name(id).to_string(),
                });
            }
        }
        if self.m.is_empty() {
            self.m = store
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let one = T::one();
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        for (((p, g), m), v) in store
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_vec(1, values.len(), values.to_vec()));
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = store(&[1.0, -2.0, 0.5]);
        let mut adam = Adam::new(1e-3);
        adam.step(&mut s, &[Tensor::zeros(1, 3)]).unwrap();
        assert_eq!(s.tensors()[0].data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // mhat = g, vhat = g^2 after bias correction: step = lr * g / (|g| + eps).
        let mut s = store(&[0.0, 0.0]);
        let mut adam = Adam::new(1e-4);
        adam.step(&mut s, &[Tensor::from_vec(1, 2, vec![3.0, -0.25])])
            .unwrap();
        let d = s.tensors()[0].data();
        assert!((d[0] + 1e-4 * 3.0 / (3.0 + 1e-8)).abs() < 1e-15);
        assert!((d[1] - 1e-4 * 0.25 / (0.25 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut s = store(&[4.0]);
        let mut adam = Adam::new(0.0);
        adam.step(&mut s, &[Tensor::from_vec(1, 1, vec![10.0])]).unwrap();
        assert_eq!(s.tensors()[0].data(), &[4.0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = store(&[1.0]);
        let mut adam = Adam::new(1e-3);
        let err = adam
            .step(&mut s, &[Tensor::from_vec(1, 1, vec![f64::NAN])])
            .unwrap_err();
        assert!(err.to_string().contains('w'), "{err}");
        assert_eq!(s.tensors()[0].data(), &[1.0]);
    }
}
