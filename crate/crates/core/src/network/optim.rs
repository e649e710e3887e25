use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::container::Container;
use super::layers::Param;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

/// Adam with per-parameter step counters, so a parameter that sits out a
/// step (e.g. the inactive head type) keeps both its value and its moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    slots: BTreeMap<String, Slot>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            slots: BTreeMap::new(),
        }
    }

    pub fn reset(&mut self) {
        self.slots.clear();
    }

    pub fn step(&mut self, params: &mut [&mut Param], lr: f32) {
        let AdamConfig { beta1, beta2, eps } = self.config;
        for p in params.iter_mut() {
            let slot = self.slots.entry(p.name.clone()).or_insert_with(|| Slot {
                m: vec![0.0; p.value.len()],
                v: vec![0.0; p.value.len()],
                t: 0,
            });
            slot.t += 1;
            let bc1 = 1.0 - beta1.powi(slot.t as i32);
            let bc2 = 1.0 - beta2.powi(slot.t as i32);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g;
                slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                p.value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    pub(crate) fn export(&self, into: &mut Container) -> serde_json::Value {
        let mut steps = serde_json::Map::new();
        for (name, slot) in &self.slots {
            into.insert(format!("adam.m.{name}"), vec![slot.m.len()], slot.m.clone());
            into.insert(format!("adam.v.{name}"), vec![slot.v.len()], slot.v.clone());
            steps.insert(name.clone(), slot.t.into());
        }
        serde_json::json!({ "config": self.config, "steps": steps })
    }

    pub(crate) fn import(meta: &serde_json::Value, from: &Container) -> Result<Self> {
        let config: AdamConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("optimizer config: {e}")))?;
        let steps: BTreeMap<String, u64> = serde_json::from_value(meta["steps"].clone())
            .map_err(|e| Error::Checkpoint(format!("optimizer steps: {e}")))?;
        let mut slots = BTreeMap::new();
        for (name, t) in steps {
            let fetch = |prefix: &str| {
                from.tensors
                    .get(&format!("{prefix}.{name}"))
                    .map(|t| t.data.clone())
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {prefix}.{name}")))
            };
            slots.insert(
                name.clone(),
                Slot {
                    m: fetch("adam.m")?,
                    v: fetch("adam.v")?,
                    t,
                },
            );
        }
        Ok(Adam { config, slots })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Param::new("p", vec![2], vec![1.0, 1.0]);
        p.grad = vec![0.5, -3.0];
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut [&mut p], 0.1);
        assert!((p.value[0] - 0.9).abs() < 1e-5);
        assert!((p.value[1] - 1.1).abs() < 1e-5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Param::new("p", vec![1], vec![5.0]);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..2000 {
            p.grad[0] = 2.0 * (p.value[0] - 2.0);
            adam.step(&mut [&mut p], 0.05);
        }
        assert!((p.value[0] - 2.0).abs() < 1e-2);
    }

    #[test]
    fn export_import_round_trip() {
        let mut p = Param::new("w", vec![3], vec![1.0, 2.0, 3.0]);
        p.grad = vec![0.1, 0.2, 0.3];
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut [&mut p], 0.01);
        let mut c = Container::new("state", serde_json::Value::Null);
        let meta = adam.export(&mut c);
        let back = Adam::import(&meta, &c).unwrap();
        assert_eq!(back, adam);
    }
}
