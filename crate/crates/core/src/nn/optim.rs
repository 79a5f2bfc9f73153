use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adaptive per-parameter step without momentum.
    Rmsprop,
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Squared-gradient decay (rmsprop) / second-moment decay (adam).
    pub decay: f64,
    /// First-moment decay (adam only).
    pub beta1: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Rmsprop,
            learning_rate: 1e-3,
            decay: 0.99,
            beta1: 0.9,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.decay) || !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::Config("optimizer decay rates must lie in [0, 1)".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("optimizer epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct GroupState {
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

/// Optimizer over named flat parameter groups; state is created lazily on
/// the first update of each group.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    groups: BTreeMap<String, GroupState>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            groups: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn step(&mut self, group: &str, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient length mismatch in group {group}");
        let cfg = self.cfg.clone();
        let state = self.groups.entry(group.to_string()).or_insert_with(|| GroupState {
            first: vec![0.0; params.len()],
            second: vec![0.0; params.len()],
            steps: 0,
        });
        state.steps += 1;
        let lr = cfg.learning_rate;
        match cfg.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Rmsprop => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(state.second.iter_mut()) {
                    *v = cfg.decay * *v + (1.0 - cfg.decay) * g * g;
                    *p -= lr * g / (v.sqrt() + cfg.epsilon);
                }
            }
            OptimizerKind::Adam => {
                let t = state.steps as i32;
                let c1 = 1.0 - cfg.beta1.powi(t);
                let c2 = 1.0 - cfg.decay.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(state.first.iter_mut())
                    .zip(state.second.iter_mut())
                {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.decay * *v + (1.0 - cfg.decay) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
                }
            }
        }
    }

    /// State as named blobs for checkpointing.
    pub fn export_state(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, s) in &self.groups {
            out.insert(format!("optim.{name}.first"), s.first.clone());
            out.insert(format!("optim.{name}.second"), s.second.clone());
            out.insert(format!("optim.{name}.steps"), vec![s.steps as f64]);
        }
        out
    }

    pub fn import_state(&mut self, blobs: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        self.groups.clear();
        for (key, first) in blobs {
            let Some(name) = key.strip_prefix("optim.").and_then(|k| k.strip_suffix(".first")) else {
                continue;
            };
            let get = |suffix: &str| {
                blobs
                    .get(&format!("optim.{name}.{suffix}"))
                    .ok_or_else(|| Error::Config(format!("optimizer state for '{name}' lacks '{suffix}'")))
            };
            let second = get("second")?;
            let steps = get("steps")?.first().copied().unwrap_or(0.0) as u64;
            self.groups.insert(
                name.to_string(),
                GroupState {
                    first: first.clone(),
                    second: second.clone(),
                    steps,
                },
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimize(kind: OptimizerKind) -> f64 {
        let mut opt = Optimizer::new(OptimizerConfig {
            kind,
            learning_rate: 0.05,
            ..Default::default()
        });
        let mut p = vec![3.0, -2.0];
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.step("w", &mut p, &g);
        }
        p.iter().map(|x| x * x).sum()
    }

    #[test]
    fn every_kind_descends_a_quadratic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Rmsprop, OptimizerKind::Adam] {
            assert!(minimize(kind) < 1e-2, "{kind:?}");
        }
    }

    #[test]
    fn zero_learning_rate_leaves_params_untouched() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Rmsprop, OptimizerKind::Adam] {
            let mut opt = Optimizer::new(OptimizerConfig {
                kind,
                learning_rate: 0.0,
                ..Default::default()
            });
            let mut p = vec![0.3, -1.7, 1e-9];
            let before = p.clone();
            opt.step("w", &mut p, &[1.0, -4.0, 7.0]);
            assert_eq!(p, before);
        }
    }

    #[test]
    fn state_round_trips_through_blobs() {
        let mut a = Optimizer::new(OptimizerConfig {
            kind: OptimizerKind::Adam,
            ..Default::default()
        });
        let mut p = vec![1.0, 2.0];
        a.step("enc", &mut p, &[0.5, -0.5]);
        let mut b = Optimizer::new(a.config().clone());
        b.import_state(&a.export_state()).unwrap();
        assert_eq!(a, b);
    }
}
