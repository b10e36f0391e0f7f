use crate::error::{Error, Result};
use crate::numerics::{Gradients, ParamSet, Scalar};

use super::OptimizerConfig;

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub warmup_steps: u64,
    pub step: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: &OptimizerConfig, params: &ParamSet<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect();
        Self {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            warmup_steps: config.warmup_steps,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// Learning rate of the next update, including warmup.
    pub fn current_learning_rate(&self) -> f64 {
        let t = self.step + 1;
        if t < self.warmup_steps {
            self.learning_rate * t as f64 / self.warmup_steps as f64
        } else {
            self.learning_rate
        }
    }

    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &Gradients<T>) -> Result<()> {
        if grads.per_param.len() != self.first_moment.len() {
            return Err(Error::shape("adam", "gradient set does not match optimizer state"));
        }
        let lr = self.current_learning_rate();
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (T::cast(self.beta1), T::cast(self.beta2));
        let (one_b1, one_b2) = (T::cast(1.0 - self.beta1), T::cast(1.0 - self.beta2));
        let step_size = T::cast(lr * (1.0 - self.beta2.powf(t)).sqrt() / (1.0 - self.beta1.powf(t)));
        let eps = T::cast(self.epsilon * (1.0 - self.beta2.powf(t)).sqrt());
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let g = &grads.per_param[i];
            let (m, v) = (&mut self.first_moment[i], &mut self.second_moment[i]);
            let w = params.get_mut(id).data_mut();
            for j in 0..w.len() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                w[j] -= step_size * m[j] / (v[j].sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so the global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm().to_f64_lossless();
    if norm > max_norm {
        grads.scale(T::cast(max_norm / norm));
    }
    norm
}
