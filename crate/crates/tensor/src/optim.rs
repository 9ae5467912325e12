use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// A parameter presented to [`Adam::step`].
pub struct Param<'p> {
    pub name: &'p str,
    pub value: &'p mut Tensor,
    pub grad: Option<&'p Tensor>,
    pub trainable: bool,
}

#[derive(Clone, Debug)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Adaptive-moment optimizer with bias correction.
///
/// Moment buffers are created lazily, keyed by parameter name, and only for
/// parameters flagged trainable.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    pub fn step(&mut self, params: &mut [Param<'_>]) -> Result<()> {
        for p in params.iter().filter(|p| p.trainable) {
            match p.grad {
                None => return Err(TensorError::MissingGrad(p.name.to_string())),
                Some(g) if g.shape() != p.value.shape() => {
                    return Err(TensorError::GradShape {
                        name: p.name.to_string(),
                        grad: g.shape().to_vec(),
                        param: p.value.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for p in params.iter_mut().filter(|p| p.trainable) {
            let grad = p.grad.expect("checked above").data();
            let m = self
                .moments
                .entry(p.name.to_string())
                .or_insert_with(|| Moments {
                    first: vec![0.0; grad.len()],
                    second: vec![0.0; grad.len()],
                });
            for (((w, &g), m1), m2) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad)
                .zip(m.first.iter_mut())
                .zip(m.second.iter_mut())
            {
                *m1 = beta1 * *m1 + (1.0 - beta1) * g;
                *m2 = beta2 * *m2 + (1.0 - beta2) * g * g;
                let mhat = *m1 / bc1;
                let vhat = *m2 / bc2;
                *w -= learning_rate * mhat / (vhat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
