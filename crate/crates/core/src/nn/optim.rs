use serde::{Deserialize, Serialize};

use super::real::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state for one flat parameter vector. Minimizes; training loops
/// pass the gradient of the negative ELBO.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    config: AdamConfig,
    m: Vec<F>,
    v: Vec<F>,
    step: u64,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Adam {
            config,
            m: vec![F::zero(); num_params],
            v: vec![F::zero(); num_params],
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [F], grads: &[F]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidInput(format!(
                "optimizer holds {} accumulators, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical {
                context: "optimizer step".into(),
                step: self.step as usize,
                detail: format!("gradient entry {i} is {}", grads[i]),
            });
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = F::from_f64_lossy(c.beta1);
        let b2 = F::from_f64_lossy(c.beta2);
        let one = F::one();
        // Bias corrections folded into the step size.
        let lr_t = c.learning_rate * (1.0 - c.beta2.powi(t)).sqrt() / (1.0 - c.beta1.powi(t));
        let lr_t = F::from_f64_lossy(lr_t);
        let eps = F::from_f64_lossy(c.eps);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            *p -= lr_t * *m / (v.sqrt() + eps);
        }
        Ok(())
    }
}
