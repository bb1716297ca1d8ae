use crate::error::{Error, Result};
use crate::tape::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Adam::new(0.9, 0.999, 1e-8)
    }
}

impl<T: Scalar> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter from its stored gradient.
    /// Frozen parameters are not touched. A non-finite gradient aborts the
    /// step before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        for (name, p) in store.params() {
            if p.trainable && !p.gradient.all_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {name} at optimizer step {}",
                    self.step + 1
                )));
            }
        }
        if self.first.is_empty() {
            for (_, p) in store.params() {
                self.first.push(Tensor::zeros(p.value.shape()));
                self.second.push(Tensor::zeros(p.value.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::from_f(self.beta1), T::from_f(self.beta2));
        let c1 = T::from_f(1.0 - self.beta1.powi(t));
        let c2 = T::from_f(1.0 - self.beta2.powi(t));
        let lr = T::from_f(lr);
        let eps = T::from_f(self.eps);
        for ((p, m), v) in store
            .params_mut()
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            if !p.trainable {
                continue;
            }
            let g = p.gradient.data();
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
