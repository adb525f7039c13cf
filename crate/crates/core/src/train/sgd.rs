use crate::engine::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamStore};

/// SGD with momentum and decoupled-from-norm weight decay:
///
/// ```text
/// v ← momentum·v + (g + wd·w)      (wd only on convolution/linear weights)
/// w ← w − lr·v
/// ```
///
/// Gradients are zeroed after the update.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Tensor<T>>,
    pub steps: u64,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: store
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
            steps: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if !store.grads_pending() {
            return Err(Error::Usage(
                "optimizer step without gradients from a backward pass".into(),
            ));
        }
        let (m, lr) = (T::of(self.momentum), T::of(lr));
        for (p, v) in store.params_mut().iter_mut().zip(&mut self.velocity) {
            if !p.trainable {
                continue;
            }
            let wd = if p.kind == ParamKind::Weight {
                T::of(self.weight_decay)
            } else {
                T::zero()
            };
            for ((w, g), vel) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(v.data_mut())
            {
                *vel = m * *vel + (*g + wd * *w);
                *w -= lr * *vel;
            }
        }
        store.zero_grads();
        self.steps += 1;
        Ok(())
    }
}
