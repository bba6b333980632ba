use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Adam with coupled L2 weight decay on parameters flagged for decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update from the accumulated gradients in `params`.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.decay { self.weight_decay } else { 0.0 };
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for (((w, &g), m), v) in value.iter_mut().zip(grad).zip(m.data_mut()).zip(v.data_mut()) {
                let g = g + decay * *w;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Linear ramp from `peak / 100` to `peak` over `warmup` iterations, then flat.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmupSchedule {
    pub peak: f64,
    pub warmup: usize,
}

impl WarmupSchedule {
    pub fn at(&self, iteration: usize) -> f64 {
        if iteration >= self.warmup {
            return self.peak;
        }
        let start = self.peak / 100.0;
        start + (self.peak - start) * iteration as f64 / self.warmup as f64
    }
}
