//! Fuses a grouped worker's entities into one agent: concatenated
//! observation, one large concatenated action, summed reward.

use super::checkpoint::{Checkpoint, CheckpointError};
use super::sac::SacLearner;
use super::{box_bounds, features, Agent, Algorithm, Experience, HyperParams, LearnerError, UpdateStats};
use crate::interface::{EntitySpec, Value};
use crate::seed::ArenaRng;

/// Concatenation of every entity's observation features.
pub fn combine_observations(obs: &[Value], specs: &[EntitySpec]) -> Value {
    Value::Real(features(obs, specs))
}

/// Splits one concatenated action into per-entity actions.
pub fn split_action(action: &[f64], specs: &[EntitySpec]) -> Vec<Value> {
    let mut off = 0;
    specs
        .iter()
        .map(|s| {
            let d = s.act_space.flat_dim();
            let v = Value::Real(action[off..off + d].to_vec());
            off += d;
            v
        })
        .collect()
}

pub fn combine_rewards(rewards: &[f64]) -> f64 {
    rewards[1..].iter().fold(rewards[0], |acc, r| acc + r)
}

/// SAC on the fused view of a group.
pub struct CombinedSac {
    inner: SacLearner,
    specs: Vec<EntitySpec>,
}

impl CombinedSac {
    pub fn new(policy: &str, hyper: HyperParams, specs: &[EntitySpec], rng: &mut ArenaRng) -> Result<Self, LearnerError> {
        let spaces: Vec<_> = specs.iter().map(|s| &s.act_space).collect();
        let bounds = box_bounds(&spaces, "sac_combined")?;
        let obs_dim = specs.iter().map(|s| s.obs_space.flat_dim()).sum();
        let inner = SacLearner::with_dims(policy, Algorithm::SacCombined.tag(), hyper, obs_dim, bounds, rng);
        Ok(CombinedSac { inner, specs: specs.to_vec() })
    }

    pub fn learner(&self) -> &SacLearner {
        &self.inner
    }

    pub fn freeze(&mut self) {
        self.inner.freeze();
    }

    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
        self.inner.restore(ckpt, Algorithm::SacCombined)
    }
}

impl Agent for CombinedSac {
    fn act(&mut self, obs: &[Value], rng: &mut ArenaRng) -> Vec<Value> {
        let x = features(obs, &self.specs);
        let a = self.inner.act_features(&x, rng).unwrap_or_else(|| self.inner.random_action(rng));
        split_action(&a, &self.specs)
    }

    fn observe(&mut self, exp: &Experience) {
        let o = features(exp.obs, &self.specs);
        let n = features(exp.next_obs, &self.specs);
        let a: Vec<f64> = exp.actions.iter().zip(&self.specs).flat_map(|(v, s)| v.to_features(s.act_space.flat_dim())).collect();
        self.inner.observe_features(&o, &a, combine_rewards(exp.rewards), &n, exp.terminal());
    }

    fn wants_update(&self) -> bool {
        self.inner.wants_update()
    }

    fn begin_update(&mut self, rng: &mut ArenaRng) -> usize {
        self.inner.begin_update(rng)
    }

    fn phase_gradient(&mut self, phase: usize) -> Vec<f64> {
        self.inner.phase_gradient(phase)
    }

    fn apply_phase(&mut self, phase: usize, mean_grad: &[f64]) {
        self.inner.apply_phase(phase, mean_grad)
    }

    fn end_update(&mut self) -> UpdateStats {
        self.inner.end_update()
    }

    fn version(&self) -> u64 {
        self.inner.version()
    }

    fn checkpoint(&self) -> Option<Checkpoint> {
        self.inner.checkpoint()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::CoopNavConfig;
    use crate::seed;

    #[test]
    fn coop_nav_group_fuses_to_42_and_6() {
        let specs = CoopNavConfig::default().entity_specs();
        let agent = CombinedSac::new("p", HyperParams::default(), &specs, &mut seed::rng(&[0])).unwrap();
        assert_eq!(agent.learner().obs_dim(), 42);
        assert_eq!(agent.learner().bounds.dim(), 6);
        assert_eq!(agent.learner().actor.input_dim(), 42);
    }

    #[test]
    fn rewards_sum_and_actions_split() {
        assert_eq!(combine_rewards(&[1.0, 1.0, 1.0]), 3.0);
        let specs = CoopNavConfig::default().entity_specs();
        let parts = split_action(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &specs);
        assert_eq!(parts[2], Value::Real(vec![5.0, 6.0]));
        let obs: Vec<Value> = (0..3).map(|i| Value::Real(vec![i as f64; 14])).collect();
        match combine_observations(&obs, &specs) {
            Value::Real(v) => {
                assert_eq!(v.len(), 42);
                assert_eq!(v[14], 1.0);
            }
            other => panic!("{other:?}"),
        }
    }
}
