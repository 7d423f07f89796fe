//! Instance normalisation with a per-channel affine, and leaky ReLU.

use super::{Act, ParamRange};

pub const NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f32 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceNorm {
    pub channels: usize,
    pub gamma: ParamRange,
    pub beta: ParamRange,
}

/// Saved forward state: the normalised input and per-channel `1/σ`.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f64>,
}

impl InstanceNorm {
    pub fn forward(&self, params: &[f32], x: &Act) -> (Act, NormCache) {
        let c = self.channels;
        let n = x.voxels() as f64;
        let mut mean = vec![0.0f64; c];
        for v in x.data.chunks_exact(c) {
            for (m, a) in mean.iter_mut().zip(v) {
                *m += *a as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0f64; c];
        for v in x.data.chunks_exact(c) {
            for ((s, a), m) in var.iter_mut().zip(v).zip(&mean) {
                let d = *a as f64 - m;
                *s += d * d;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / n + NORM_EPS).sqrt()).collect();
        let gamma = self.gamma.of(params);
        let beta = self.beta.of(params);
        let mut xhat = vec![0.0f32; x.data.len()];
        let mut y = Act::zeros(x.shape, c);
        for ((xv, hv), yv) in x.data.chunks_exact(c).zip(xhat.chunks_exact_mut(c)).zip(y.data.chunks_exact_mut(c)) {
            for ch in 0..c {
                let h = ((xv[ch] as f64 - mean[ch]) * inv_std[ch]) as f32;
                hv[ch] = h;
                yv[ch] = gamma[ch] * h + beta[ch];
            }
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(&self, params: &[f32], cache: &NormCache, dy: &Act, grads: &mut [f32]) -> Act {
        let c = self.channels;
        let n = dy.voxels() as f64;
        let gamma = self.gamma.of(params);
        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xhat = vec![0.0f64; c];
        for (dv, hv) in dy.data.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
            for ch in 0..c {
                sum_dy[ch] += dv[ch] as f64;
                sum_dy_xhat[ch] += dv[ch] as f64 * hv[ch] as f64;
            }
        }
        for (g, s) in self.gamma.of_mut(grads).iter_mut().zip(&sum_dy_xhat) {
            *g += *s as f32;
        }
        for (g, s) in self.beta.of_mut(grads).iter_mut().zip(&sum_dy) {
            *g += *s as f32;
        }
        // dxhat = γ·dy, so Σdxhat and Σdxhat·xhat are γ times the sums above.
        let mut dx = Act::zeros(dy.shape, c);
        let coef: Vec<f64> = (0..c).map(|ch| gamma[ch] as f64 * cache.inv_std[ch] / n).collect();
        for ((dv, hv), xv) in dy.data.chunks_exact(c).zip(cache.xhat.chunks_exact(c)).zip(dx.data.chunks_exact_mut(c)) {
            for ch in 0..c {
                xv[ch] = (coef[ch] * (n * dv[ch] as f64 - sum_dy[ch] - hv[ch] as f64 * sum_dy_xhat[ch])) as f32;
            }
        }
        dx
    }
}

pub fn leaky_relu_inplace(x: &mut Act, slope: f32) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v *= slope;
        }
    }
}

/// Backward through leaky ReLU given its output (sign is preserved by the activation).
pub fn leaky_relu_backward_inplace(dy: &mut Act, y: &Act, slope: f32) {
    for (d, o) in dy.data.iter_mut().zip(&y.data) {
        if *o < 0.0 {
            *d *= slope;
        }
    }
}
