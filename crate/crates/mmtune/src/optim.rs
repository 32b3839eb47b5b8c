//! SGD with momentum and weight decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
/// Optimizer hyper-parameters plus per-parameter velocity buffers, keyed by
/// parameter name so state survives model traversal order changes.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Per-name learning-rate multipliers matched by longest prefix.
    /// Used for modality-specific learning rates in stage-2 variants.
    pub lr_multipliers: Vec<(String, f64)>,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimizerState {
            learning_rate,
            momentum,
            weight_decay,
            lr_multipliers: Vec::new(),
            velocity: BTreeMap::new(),
        }
    }

    fn lr_for(&self, name: &str) -> f64 {
        let mut best: Option<(usize, f64)> = None;
        for (prefix, mult) in &self.lr_multipliers {
            if name.starts_with(prefix.as_str()) {
                match best {
                    Some((len, _)) if prefix.len() <= len => {}
                    _ => best = Some((prefix.len(), *mult)),
                }
            }
        }
        self.learning_rate * best.map(|(_, m)| m).unwrap_or(1.0)
    }

    /// One SGD step on a single named parameter:
    /// `v <- momentum*v + grad + weight_decay*param; param <- param - lr*v`.
    ///
    /// Aborts with the parameter's name if its gradient is non-finite.
    pub fn step(&mut self, name: &str, param: &mut [f64], grad: &[f64]) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::Shape {
                context: "sgd_step",
                expected: format!("grad of {} entries for {name}", param.len()),
                found: format!("{}", grad.len()),
            });
        }
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite {
                what: "gradient".into(),
                detail: format!("parameter {name}"),
            });
        }
        let lr = self.lr_for(name);
        let momentum = self.momentum;
        let wd = self.weight_decay;
        let vel = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; param.len()]);
        if vel.len() != param.len() {
            return Err(Error::Shape {
                context: "sgd_step",
                expected: format!("velocity of {} entries for {name}", param.len()),
                found: format!("{}", vel.len()),
            });
        }
        for i in 0..param.len() {
            let v = momentum * vel[i] + grad[i] + wd * param[i];
            vel[i] = v;
            param[i] -= lr * v;
        }
        Ok(())
    }

    pub fn reset_velocity(&mut self) {
        self.velocity.clear();
    }
}
