//! Adam with bias correction.

use std::collections::HashMap;

use ndarray::ArrayD;

use super::{NnError, ParamSet};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer state: step count plus first/second moment buffers keyed by
/// parameter name.
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    first: HashMap<String, ArrayD<f32>>,
    second: HashMap<String, ArrayD<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over the whole parameter set. Every parameter must have a
    /// matching gradient.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &[(String, ArrayD<f32>)],
    ) -> Result<(), NnError> {
        let names: Vec<String> = params.names().map(String::from).collect();
        let grad_map: HashMap<&str, &ArrayD<f32>> =
            grads.iter().map(|(n, g)| (n.as_str(), g)).collect();
        for name in &names {
            if !grad_map.contains_key(name.as_str()) {
                return Err(NnError::MissingGradient(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for name in &names {
            let g = grad_map[name.as_str()];
            let p = params.get_mut(name)?;
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
                });
        }
        Ok(())
    }
}
