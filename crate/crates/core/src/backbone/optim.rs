use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Fixed learning rate used by every trainer.
pub const LEARNING_RATE: f64 = 0.0002;

#[derive(Clone, Debug)]
pub struct Adam<T = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, store: &ParamStore<T>) -> Self {
        let zeros = || store.tensors().iter().map(|t| vec![T::zero(); t.numel()]).collect();
        Adam {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::shape("one gradient per parameter tensor required"));
        }
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let step_size = T::of(self.lr * bc2.sqrt() / bc1);
        let eps = T::of(self.eps * bc2.sqrt());
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.values_mut(i);
            if g.numel() != p.len() {
                return Err(Error::shape("gradient size mismatch"));
            }
            for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= step_size * *m / (v.sqrt() + eps);
            }
        }
        Ok(())
    }
}
