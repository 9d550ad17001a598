use crate::error::{Error, Result};
use crate::model::Parameters;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f32,
    pub warmup_steps: usize,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            warmup_steps: 100,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    /// Linear warmup to the base rate, constant afterwards. `step` is 1-based.
    pub fn learning_rate_at(&self, step: usize) -> f32 {
        if self.warmup_steps == 0 {
            return self.learning_rate;
        }
        self.learning_rate * (step as f32 / self.warmup_steps as f32).min(1.0)
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: OptimConfig,
    step: usize,
    moments: Vec<Option<(Vec<f32>, Vec<f32>)>>,
}

impl AdamW {
    pub fn new(config: OptimConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Updates every non-frozen parameter that holds a gradient, then clears
    /// all gradients. A non-finite gradient aborts the step before any
    /// parameter changes.
    pub fn step(&mut self, params: &mut Parameters) -> Result<()> {
        for p in params.iter() {
            if let Some(g) = p.tensor.grad() {
                if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        coordinate: i,
                        detail: format!("gradient of `{}`", p.name),
                    });
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let lr = c.learning_rate_at(self.step);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        for (p, slot) in params.iter_mut().zip(self.moments.iter_mut()) {
            if p.frozen {
                continue;
            }
            let Some(g) = p.tensor.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let (m, v) = slot.get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let w = p.tensor.data_mut();
            for i in 0..g.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                w[i] -= lr * (update + c.weight_decay * w[i]);
            }
        }
        params.zero_grad();
        Ok(())
    }
}
