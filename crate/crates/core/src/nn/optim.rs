//! SGD with Nesterov momentum, Adam, and global gradient-norm clipping.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<f32>,
}

impl Sgd {
    pub fn new(param_count: usize, momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: vec![0.0; param_count] }
    }

    /// One Nesterov step: `g += wd·p; v = μv + g; p -= lr·(g + μv)`.
    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.velocity.len());
        let (mu, wd, lr) = (self.momentum as f32, self.weight_decay as f32, lr as f32);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            let g = g + wd * *p;
            *v = mu * *v + g;
            *p -= lr * (g + mu * *v);
        }
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u32,
    pub first_moment: Vec<f32>,
    pub second_moment: Vec<f32>,
}

impl Adam {
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(param_count: usize, beta1: f64, weight_decay: f64) -> Self {
        Adam {
            beta1,
            beta2: Self::BETA2,
            eps: Self::EPS,
            weight_decay,
            step_count: 0,
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        assert_eq!(params.len(), grads.len());
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = (1.0 - b1.powi(t)) as f32;
        let c2 = (1.0 - b2.powi(t)) as f32;
        let (b1, b2, wd, lr, eps) = (b1 as f32, b2 as f32, self.weight_decay as f32, lr as f32, self.eps as f32);
        for (((p, g), m), v) in
            params.iter_mut().zip(grads).zip(self.first_moment.iter_mut()).zip(self.second_moment.iter_mut())
        {
            let g = g + wd * *p;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
}

/// The optimizer selected by the plan.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        match self {
            Optimizer::Sgd(o) => o.step(params, grads, lr),
            Optimizer::Adam(o) => o.step(params, grads, lr),
        }
    }

    /// Momentum buffer (SGD) or first moment (Adam).
    pub fn momentum_buffer(&self) -> &[f32] {
        match self {
            Optimizer::Sgd(o) => &o.velocity,
            Optimizer::Adam(o) => &o.first_moment,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Optimizer::Sgd(_) => "sgd_nesterov",
            Optimizer::Adam(_) => "adam",
        }
    }
}

pub fn grad_norm(grads: &[f32]) -> f64 {
    grads.iter().map(|g| (*g as f64) * (*g as f64)).sum::<f64>().sqrt()
}

/// Rescales `grads` so their L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f32], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let scale = (max_norm / (norm + 1e-6)) as f32;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nesterov_step_by_hand() {
        let mut opt = Sgd::new(1, 0.9, 0.0);
        let mut p = [1.0f32];
        opt.step(&mut p, &[2.0], 0.1);
        // v = 2, update = 2 + 0.9·2 = 3.8
        assert!((p[0] - (1.0 - 0.38)).abs() < 1e-6);
        opt.step(&mut p, &[2.0], 0.1);
        // v = 0.9·2 + 2 = 3.8, update = 2 + 0.9·3.8 = 5.42
        assert!((p[0] - (0.62 - 0.542)).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_pulls_towards_zero() {
        let mut opt = Sgd::new(1, 0.0, 0.5);
        let mut p = [2.0f32];
        opt.step(&mut p, &[0.0], 0.1);
        assert!((p[0] - 1.9).abs() < 1e-6);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Adam::new(2, 0.9, 0.0);
        let mut p = [1.0f32, -1.0];
        opt.step(&mut p, &[0.003, -40.0], 0.01);
        assert!((p[0] - 0.99).abs() < 1e-5);
        assert!((p[1] + 0.99).abs() < 1e-5);
        opt.step(&mut p, &[0.003, -40.0], 0.01);
        assert!((p[0] - 0.98).abs() < 1e-5);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = [3.0f32, 4.0];
        assert!((clip_grad_norm(&mut g, 1.0) - 5.0).abs() < 1e-9);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-5);
        let mut small = [0.3f32, 0.4];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small, [0.3, 0.4]);
    }
}
