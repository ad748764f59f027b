//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> AdamW<T> {
    /// β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new(n_params: usize, weight_decay: T) -> Self {
        Self {
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            weight_decay,
            m: vec![T::zero(); n_params],
            v: vec![T::zero(); n_params],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update. Weight decay is applied to the parameters directly, before
    /// the adaptive step.
    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: T) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let one = T::one();
        let bc1 = one - self.beta1.powi(self.t);
        let bc2 = one - self.beta2.powi(self.t);
        let decay = one - lr * self.weight_decay;
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *p *= decay;
            *m = self.beta1 * *m + (one - self.beta1) * g;
            *v = self.beta2 * *v + (one - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Decays from `base_lr` at step 0 towards 0 at `total_steps`.
#[derive(Clone, Copy, Debug)]
pub struct CosineSchedule<T> {
    pub base_lr: T,
    pub total_steps: usize,
}

impl<T: Scalar> CosineSchedule<T> {
    pub fn lr(&self, step: usize) -> T {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let progress = T::from_count(step.min(self.total_steps)) / T::from_count(self.total_steps);
        self.base_lr * T::lit(0.5) * (T::one() + (T::PI() * progress).cos())
    }
}
