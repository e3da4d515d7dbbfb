//! Central-difference gradient checking.
//!
//! Uses the five-point stencil
//! `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`, whose truncation
//! error is O(h⁴). That allows steps of 1e-4 to 1e-3, where rounding noise in
//! deep graphs stays far below the gradients being checked.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Scalar;

/// Compares analytic gradients of the scalar built by `build` against
/// five-point central differences with step `epsilon`, over every element of every
/// trainable parameter. Returns the largest
/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn gradient_check<T, F>(store: &ParamStore<T>, epsilon: f64, build: F) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<'_, T>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = build(&mut g)?;
        g.backward(loss)?
    };
    let eval = |s: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::new(s);
        let loss = build(&mut g)?;
        Ok(g.value(loss).data()[0].as_f64())
    };

    let mut work = store.clone();
    let mut worst = 0.0f64;
    for id in store.ids() {
        if !store.is_trainable(id) {
            continue;
        }
        let grad = analytic.dense(id, store);
        for k in 0..store.get(id).len() {
            let original = work.get(id).data()[k];
            let mut at = |offset: f64| -> Result<f64> {
                work.get_mut(id).data_mut()[k] = T::of(original.as_f64() + offset);
                eval(&work)
            };
            let near = at(epsilon)? - at(-epsilon)?;
            let far = at(2.0 * epsilon)? - at(-2.0 * epsilon)?;
            work.get_mut(id).data_mut()[k] = original;

            let numeric = (8.0 * near - far) / (12.0 * epsilon);
            let a = grad.data()[k].as_f64();
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
