//! Deterministic protocol fixture: every entity observes `(t + 1, id)` and is
//! rewarded with the numeric value of its own action.

use serde::{Deserialize, Serialize};

use super::{canonical_actions, EnvError, Environment};
use crate::interface::{EntitySpec, Info, SpaceSpec, StepBatch, Value, INFO_TRUNCATED};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EchoConfig {
    pub n_entities: usize,
    pub horizon: u32,
    pub act_space: SpaceSpec,
}

impl Default for EchoConfig {
    fn default() -> Self {
        EchoConfig { n_entities: 1, horizon: 10, act_space: SpaceSpec::discrete(16) }
    }
}

impl EchoConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.n_entities == 0 || self.horizon == 0 {
            return Err(EnvError::InvalidConfig("echo needs n_entities >= 1 and horizon >= 1".into()));
        }
        self.act_space.validate().map_err(|e| EnvError::InvalidConfig(e.to_string()))
    }

    pub fn entity_specs(&self) -> Vec<EntitySpec> {
        let high = self.horizon.max(self.n_entities as u32) as f64;
        (0..self.n_entities)
            .map(|i| EntitySpec {
                entity_id: i,
                obs_space: SpaceSpec::boxed(&[2], 0.0, high),
                act_space: self.act_space.clone(),
            })
            .collect()
    }
}

pub struct Echo {
    config: EchoConfig,
    specs: Vec<EntitySpec>,
    t: Option<u32>,
}

impl Echo {
    pub fn new(config: EchoConfig) -> Result<Self, EnvError> {
        config.validate()?;
        let specs = config.entity_specs();
        Ok(Echo { config, specs, t: None })
    }

    fn obs(&self, t: u32) -> Vec<Value> {
        (0..self.config.n_entities).map(|i| Value::Real(vec![t as f64, i as f64])).collect()
    }
}

impl Environment for Echo {
    fn entity_specs(&self) -> &[EntitySpec] {
        &self.specs
    }

    fn reset(&mut self, _episode_seed: u64) -> Result<Vec<Value>, EnvError> {
        self.t = Some(0);
        Ok(self.obs(0))
    }

    fn step(&mut self, actions: &[Value]) -> Result<StepBatch, EnvError> {
        let actions = canonical_actions(&self.specs, actions)?;
        let t = self.t.ok_or(EnvError::NotReset)?;
        if t >= self.config.horizon {
            return Err(EnvError::StepAfterDone);
        }
        let t = t + 1;
        self.t = Some(t);
        let done = t == self.config.horizon;
        let mut info = Info::new();
        if done {
            info.insert(INFO_TRUNCATED.into(), "true".into());
        }
        Ok(StepBatch {
            observations: self.obs(t),
            rewards: actions.iter().map(Value::numeric).collect(),
            done,
            infos: vec![info; self.config.n_entities],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(e: usize, t: u32) -> Echo {
        Echo::new(EchoConfig { n_entities: e, horizon: t, ..Default::default() }).unwrap()
    }

    #[test]
    fn echoes_actions_and_time() {
        let mut e = env(2, 3);
        e.reset(0).unwrap();
        let b = e.step(&[Value::Discrete(1), Value::Discrete(0)]).unwrap();
        assert_eq!(b.rewards, vec![1.0, 0.0]);
        assert!(!b.done);
        assert_eq!(b.observations, vec![Value::Real(vec![1.0, 0.0]), Value::Real(vec![1.0, 1.0])]);
        e.step(&[Value::Discrete(0), Value::Discrete(0)]).unwrap();
        let last = e.step(&[Value::Discrete(0), Value::Discrete(0)]).unwrap();
        assert!(last.done);
        assert_eq!(e.step(&[Value::Discrete(0), Value::Discrete(0)]), Err(EnvError::StepAfterDone));
    }

    #[test]
    fn replay_is_deterministic() {
        let run = || {
            let mut e = env(2, 5);
            e.reset(0).unwrap();
            (0..5)
                .map(|k| e.step(&[Value::Discrete(k % 3), Value::Discrete(2)]).unwrap().to_frame())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
