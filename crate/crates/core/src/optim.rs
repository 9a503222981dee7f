//! AdamW with linear warmup followed by a constant learning rate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled decay, applied to weight matrices only (not to biases or norm gains).
    pub weight_decay: f64,
    pub warmup_proportion: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            weight_decay: 0.01,
            warmup_proportion: 0.05,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.warmup_proportion);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

pub struct AdamW {
    config: AdamConfig,
    warmup_steps: usize,
    step: usize,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamConfig, total_steps: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            warmup_steps: (config.warmup_proportion * total_steps as f64).ceil() as usize,
            step: 0,
            state: BTreeMap::new(),
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate used by update number `step` (1-based).
    pub fn rate_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.config.learning_rate
        } else {
            self.config.learning_rate * step as f64 / self.warmup_steps as f64
        }
    }

    /// Applies one update. `grads` are matched to `params` by name; parameters
    /// without a gradient are left untouched.
    pub fn step(&mut self, params: Vec<(String, &mut Matrix)>, grads: &[(String, Matrix)]) -> Result<()> {
        self.step += 1;
        let lr = self.rate_at(self.step);
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let by_name: BTreeMap<&str, &Matrix> = grads.iter().map(|(n, g)| (n.as_str(), g)).collect();
        for (name, p) in params {
            let Some(g) = by_name.get(name.as_str()) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!("gradient for {name} has shape {:?}", g.shape())));
            }
            let st = self.state.entry(name).or_insert_with(|| Moments {
                m: vec![0.0; p.len()],
                v: vec![0.0; p.len()],
            });
            let decay = if p.rows() > 1 && p.cols() > 1 { c.weight_decay } else { 0.0 };
            for (((w, &gi), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(&mut st.m).zip(&mut st.v) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * gi;
                *v = c.beta2 * *v + (1.0 - c.beta2) * gi * gi;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + c.epsilon);
                *w -= lr * (update + decay * *w);
            }
        }
        Ok(())
    }
}

/// Averages several named-gradient lists with identical layouts.
pub fn mean_grads(batch: Vec<Vec<(String, Matrix)>>) -> Vec<(String, Matrix)> {
    let n = batch.len();
    let mut iter = batch.into_iter();
    let Some(mut acc) = iter.next() else { return Vec::new() };
    for g in iter {
        for ((_, a), (_, b)) in acc.iter_mut().zip(&g) {
            a.add_assign(b);
        }
    }
    for (_, a) in &mut acc {
        a.scale(1.0 / n as f64);
    }
    acc
}
