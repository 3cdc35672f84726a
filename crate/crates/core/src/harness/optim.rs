use std::f64::consts::PI;

use ndarray::ArrayD;

use super::config::OptimizerConfig;
use crate::nn::{Layer, Scalar};

/// Cosine decay from `lr` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(cfg: &OptimizerConfig, step: usize, total_steps: usize) -> f64 {
    if total_steps <= 1 {
        return cfg.lr;
    }
    let t = (step as f64 / (total_steps - 1) as f64).min(1.0);
    cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + (PI * t).cos())
}

/// Adaptive-moment optimizer over the trainable parameters of a layer.
pub struct Adam<T> {
    cfg: OptimizerConfig,
    moments: Vec<(ArrayD<T>, ArrayD<T>)>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self { cfg, moments: Vec::new(), t: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update with learning rate `lr` using the accumulated gradients.
    pub fn step(&mut self, model: &mut dyn Layer<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (lr_t, eps) = (T::lit(lr * c2.sqrt() / c1), T::lit(self.cfg.eps * c2.sqrt()));
        let (b1, b2) = (T::lit(b1), T::lit(b2));
        let one = T::one();
        let moments = &mut self.moments;
        let mut i = 0;
        model.visit_params("", &mut |_, p| {
            if !p.requires_grad {
                return;
            }
            if moments.len() == i {
                moments.push((ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())));
            }
            let (m, v) = &mut moments[i];
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    *w -= lr_t * *m / (v.sqrt() + eps);
                });
            i += 1;
        });
    }
}
