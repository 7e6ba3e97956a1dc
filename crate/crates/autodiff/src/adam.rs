use serde::{Deserialize, Serialize};

use crate::error::AutodiffError;
use crate::params::{ParamGrads, ParamStore};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().map(|(_, e)| vec![0.0; e.value.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Non-finite gradients leave parameters and state
    /// untouched and return an error naming the offending entry.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        if grads.grads.len() != store.len() || self.m.len() != store.len() {
            return Err(AutodiffError::Misaligned);
        }
        if let Some(name) = grads.first_non_finite(store) {
            return Err(AutodiffError::NonFiniteGradient(name.to_string()));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.names().map(|n| store.id(n).expect("own name")).collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = grads.grads[k].as_ref() else { continue };
            let mut value = store.value(id).data().to_vec();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..value.len() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            store.set_value(id, &value)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::tape::Tape;

    #[test]
    fn first_step_on_square() {
        let mut store = ParamStore::new();
        let w = store.insert("w", &[], vec![1.0], true).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let y = tape.powi(b.var(w), 2).unwrap();
        let g = store.gradients(&b, &tape.backward_scalar(y).unwrap());
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store, &g).unwrap();
        let expected = 1.0 - 1e-3 * 2.0 / (2.0 + 1e-8);
        assert!((store.value(w).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_change() {
        let mut store = ParamStore::new();
        store.insert("w", &[2], vec![1.0, 2.0], true).unwrap();
        let g = ParamGrads {
            grads: vec![Some(Matrix::row(vec![f64::NAN, 1.0]))],
        };
        let mut adam = Adam::new(AdamConfig::default(), &store);
        assert!(matches!(adam.step(&mut store, &g), Err(AutodiffError::NonFiniteGradient(_))));
        assert_eq!(store.flat_trainable(), vec![1.0, 2.0]);
        assert_eq!(adam.steps_taken(), 0);
    }
}
