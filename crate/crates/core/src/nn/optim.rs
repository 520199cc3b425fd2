use serde::{Deserialize, Serialize};

/// First-order optimizer selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd { momentum: 0.9 }
    }
}

/// Learning-rate decay over a fixed number of optimizer steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Linear ramp from the base rate to `base · end_factor`.
    Linear { end_factor: f64 },
    /// `base · (1 − step/total)^power`.
    Poly { power: f64 },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, step: usize, total: usize) -> f64 {
        let frac = if total == 0 {
            0.0
        } else {
            (step as f64 / total as f64).min(1.0)
        };
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Linear { end_factor } => base * (1.0 - frac * (1.0 - end_factor)),
            LrSchedule::Poly { power } => base * (1.0 - frac).powf(*power),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    m: Vec<f32>,
    v: Vec<f32>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, n: usize) -> Self {
        let v = match config {
            OptimizerConfig::Adam { .. } => vec![0.0; n],
            OptimizerConfig::Sgd { .. } => Vec::new(),
        };
        Self {
            config,
            m: vec![0.0; n],
            v,
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        assert_eq!(params.len(), grads.len());
        self.steps += 1;
        match self.config {
            OptimizerConfig::Sgd { momentum } => {
                let mu = momentum as f32;
                let lr = lr as f32;
                for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut self.m) {
                    *m = mu * *m + g;
                    *p -= lr * *m;
                }
            }
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let (b1, b2) = (beta1 as f32, beta2 as f32);
                let step = (lr * c2.sqrt() / c1) as f32;
                let eps = (eps * c2.sqrt()) as f32;
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= step * *m / (v.sqrt() + eps);
                }
            }
        }
    }
}

/// Rescales `grads` in place so its L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f32], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for g in grads {
            *g *= s;
        }
    }
    norm
}
