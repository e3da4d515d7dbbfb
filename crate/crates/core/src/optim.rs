//! Adam with bias correction.

use log::warn;

use crate::params::{Gradients, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Adam<T: Scalar = f32> {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    /// Adam with the usual defaults (β1 = 0.9, β2 = 0.999, ε = 1e-8).
    pub fn new(store: &ParamStore<T>) -> Self {
        Self::with_betas(store, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        assert!(beta1 > 0.0 && beta1 < 1.0, "beta1 must lie in (0, 1)");
        assert!(beta2 > 0.0 && beta2 < 1.0, "beta2 must lie in (0, 1)");
        let zeros = |t: &Tensor<T>| Tensor::zeros(t.rows(), t.cols());
        Adam {
            step: 0,
            beta1,
            beta2,
            eps,
            first: store.iter().map(|(_, _, t)| zeros(t)).collect(),
            second: store.iter().map(|(_, _, t)| zeros(t)).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient, frozen
    /// parameters and parameters with a non-finite gradient are left
    /// untouched; the names of the latter are returned.
    pub fn update(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &Gradients<T>,
        lr: f64,
    ) -> Vec<String> {
        assert!(lr > 0.0, "learning rate must be positive");
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let bias1 = T::of(1.0 - self.beta1.powi(t));
        let bias2 = T::of(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        let mut skipped = Vec::new();

        for (id, grad) in grads.iter() {
            if !store.is_trainable(id) {
                continue;
            }
            if !grad.is_finite() {
                warn!(
                    "skipping update of `{}`: non-finite gradient",
                    store.name(id)
                );
                skipped.push(store.name(id).to_string());
                continue;
            }
            let frozen = store.frozen_rows(id).map(|r| r.to_vec());
            let cols = grad.cols();
            let m = self.first[id.index()].data_mut();
            let v = self.second[id.index()].data_mut();
            let param = store.get_mut(id).data_mut();
            for (k, &g) in grad.data().iter().enumerate() {
                if frozen.as_ref().is_some_and(|rows| rows[k / cols]) {
                    continue;
                }
                m[k] = b1 * m[k] + one_b1 * g;
                v[k] = b2 * v[k] + one_b2 * g * g;
                let m_hat = m[k] / bias1;
                let v_hat = v[k] / bias2;
                param[k] = param[k] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        skipped
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> (ParamStore<f64>, crate::params::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(value)).unwrap();
        (s, id)
    }

    fn grads_for(id: crate::params::ParamId, g: f64) -> Gradients<f64> {
        let mut grads = Gradients::new(1);
        grads.accumulate(id, &Tensor::scalar(g));
        grads
    }

    #[test]
    fn first_step_matches_closed_form() {
        // m̂ = g and v̂ = g² on the first step, so the update is lr·g/(|g|+ε).
        let (mut s, id) = single(1.0);
        let mut adam = Adam::new(&s);
        adam.update(&mut s, &grads_for(id, 0.5), 3e-4);
        let delta = 1.0 - s.get(id).data()[0];
        let expected = 3e-4 * 0.5 / (0.5 + 1e-8);
        assert!((delta - expected).abs() < 1e-15);
        assert!((delta - 2.99999e-4).abs() < 1e-9);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut s, id) = single(0.25);
        let mut adam = Adam::new(&s);
        adam.update(&mut s, &grads_for(id, 0.0), 3e-4);
        assert_eq!(s.get(id).data()[0], 0.25);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn repeated_gradient_moves_against_it() {
        let (mut s, id) = single(0.0);
        let mut adam = Adam::new(&s);
        adam.update(&mut s, &grads_for(id, 0.2), 1e-2);
        let after_one = s.get(id).data()[0];
        adam.update(&mut s, &grads_for(id, 0.2), 1e-2);
        let after_two = s.get(id).data()[0];
        assert!(after_one < 0.0 && after_one.is_finite());
        assert!(after_two < after_one && after_two.is_finite());
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let (mut s, id) = single(1.0);
        let mut adam = Adam::new(&s);
        let skipped = adam.update(&mut s, &grads_for(id, f64::NAN), 3e-4);
        assert_eq!(skipped, vec!["p".to_string()]);
        assert_eq!(s.get(id).data()[0], 1.0);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn frozen_rows_do_not_move() {
        let mut s = ParamStore::<f64>::new();
        let id = s
            .add("emb", Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap())
            .unwrap();
        s.set_frozen_rows(id, vec![true, false]);
        let mut grads = Gradients::new(1);
        grads.accumulate(id, &Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        Adam::new(&s).update(&mut s, &grads, 0.1);
        assert_eq!(s.get(id).data()[0], 1.0);
        assert!(s.get(id).data()[1] < 1.0);
    }
}
