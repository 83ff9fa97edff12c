use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Scalar};

pub trait Optimizer<T: Scalar> {
    /// Applies one update and advances the step counter.
    fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>);

    /// Learning rate that the next `step` will use.
    fn current_lr(&self) -> f64;
}

/// Plain gradient descent, `p -= lr * g`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl<T: Scalar> Optimizer<T> for Sgd {
    fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) {
        let lr = T::from_f64_lossy(self.lr);
        for (id, g) in grads.iter() {
            params.get_mut(id).data_mut().iter_mut().zip(g).for_each(|(p, &d)| *p -= lr * d);
        }
    }

    fn current_lr(&self) -> f64 {
        self.lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-5, warmup_steps: 200, beta1: 0.9, beta2: 0.98, eps: 1e-8, clip_norm: 1.0 }
    }
}

/// Adaptive moment estimation with linear warmup to a constant rate.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: usize,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = |_| params.iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect();
        Self { config, step: 0, m: zeros(()), v: zeros(()) }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let w = self.config.warmup_steps;
        if w == 0 || step >= w {
            self.config.lr
        } else {
            self.config.lr * (step + 1) as f64 / w as f64
        }
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) {
        let lr = self.lr_at(self.step);
        self.step += 1;
        let c = &self.config;
        let norm = grads.global_norm();
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm { c.clip_norm / norm } else { 1.0 };
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step_size = T::from_f64_lossy(lr / bc1);
        let bc2_sqrt = T::from_f64_lossy(bc2.sqrt());
        let eps = T::from_f64_lossy(c.eps);
        let clip = T::from_f64_lossy(clip);
        for (id, g) in grads.iter() {
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g[i] * clip;
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                p[i] -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
        }
    }

    fn current_lr(&self) -> f64 {
        self.lr_at(self.step)
    }
}
