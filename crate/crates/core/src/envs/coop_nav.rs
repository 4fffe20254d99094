//! Cooperative Navigation: agents in a bounded plane collectively rewarded for
//! covering fixed targets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{canonical_actions, EnvError, Environment};
use crate::interface::{EntitySpec, Info, SpaceSpec, StepBatch, Value, INFO_TRUNCATED};
use crate::seed;

/// Agents and targets spawn inside this half extent.
const SPAWN_HALF_EXTENT: f64 = 0.9;
const MAX_LAYOUT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoopNavConfig {
    pub n_agents: usize,
    pub n_targets: usize,
    pub episode_len: u32,
    pub occupancy_radius: f64,
    pub agent_radius: f64,
    pub collision_penalty_weight: f64,
    pub world_half_extent: f64,
    pub velocity_damping: f64,
    pub accel_gain: f64,
    pub max_speed: f64,
    pub min_target_separation: f64,
    pub seed: u64,
}

impl Default for CoopNavConfig {
    fn default() -> Self {
        CoopNavConfig {
            n_agents: 3,
            n_targets: 3,
            episode_len: 300,
            occupancy_radius: 0.1,
            agent_radius: 0.05,
            collision_penalty_weight: 0.0,
            world_half_extent: 1.0,
            velocity_damping: 0.5,
            accel_gain: 0.1,
            max_speed: 0.1,
            min_target_separation: 0.3,
            seed: 0,
        }
    }
}

impl CoopNavConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidConfig(m.to_string()));
        if self.n_agents == 0 || self.n_targets == 0 {
            return bad("coop_nav needs at least one agent and one target");
        }
        if self.episode_len == 0 {
            return bad("episode_len must be >= 1");
        }
        if !(self.occupancy_radius > 0.0) {
            return bad("occupancy_radius must be > 0");
        }
        if !(self.collision_penalty_weight >= 0.0) || !self.collision_penalty_weight.is_finite() {
            return bad("collision_penalty_weight must be finite and >= 0");
        }
        if !(self.world_half_extent > 0.0) || !(self.max_speed > 0.0) || !(self.agent_radius >= 0.0) {
            return bad("world_half_extent and max_speed must be > 0, agent_radius >= 0");
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        4 + 2 * self.n_targets + 2 * (self.n_agents - 1)
    }

    pub fn entity_specs(&self) -> Vec<EntitySpec> {
        let ext = 2.0 * self.world_half_extent;
        (0..self.n_agents)
            .map(|i| EntitySpec {
                entity_id: i,
                obs_space: SpaceSpec::boxed(&[self.obs_dim()], -ext, ext),
                act_space: SpaceSpec::boxed(&[2], -1.0, 1.0),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoopNavState {
    pub agent_pos: Vec<[f64; 2]>,
    pub agent_vel: Vec<[f64; 2]>,
    pub target_pos: Vec<[f64; 2]>,
    pub t: u32,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Number of targets with at least one agent inside the closed ball of `radius`.
pub fn occupancy_count(agent_pos: &[[f64; 2]], target_pos: &[[f64; 2]], radius: f64) -> usize {
    target_pos.iter().filter(|&&t| agent_pos.iter().any(|&a| dist(a, t) <= radius)).count()
}

/// Per agent, how many other agents overlap it (centres within `2 * agent_radius`).
pub fn collision_count(agent_pos: &[[f64; 2]], agent_radius: f64) -> Vec<usize> {
    agent_pos
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            agent_pos
                .iter()
                .enumerate()
                .filter(|&(j, &b)| j != i && dist(a, b) <= 2.0 * agent_radius)
                .count()
        })
        .collect()
}

pub struct CoopNav {
    config: CoopNavConfig,
    specs: Vec<EntitySpec>,
    state: Option<CoopNavState>,
}

impl CoopNav {
    pub fn new(config: CoopNavConfig) -> Result<Self, EnvError> {
        config.validate()?;
        let specs = config.entity_specs();
        Ok(CoopNav { config, specs, state: None })
    }

    /// Starts from a hand-built state, bypassing sampling.
    pub fn from_state(config: CoopNavConfig, state: CoopNavState) -> Result<Self, EnvError> {
        let mut env = CoopNav::new(config)?;
        if state.agent_pos.len() != env.config.n_agents || state.target_pos.len() != env.config.n_targets {
            return Err(EnvError::InvalidConfig("state shape does not match config".into()));
        }
        env.state = Some(state);
        Ok(env)
    }

    pub fn config(&self) -> &CoopNavConfig {
        &self.config
    }

    pub fn state(&self) -> Option<&CoopNavState> {
        self.state.as_ref()
    }

    pub fn observations(&self) -> Vec<Value> {
        let s = self.state.as_ref().expect("observations need a reset environment");
        (0..self.config.n_agents)
            .map(|i| {
                let p = s.agent_pos[i];
                let mut o = Vec::with_capacity(self.config.obs_dim());
                o.extend_from_slice(&p);
                o.extend_from_slice(&s.agent_vel[i]);
                for t in &s.target_pos {
                    o.push(t[0] - p[0]);
                    o.push(t[1] - p[1]);
                }
                for (j, q) in s.agent_pos.iter().enumerate() {
                    if j != i {
                        o.push(q[0] - p[0]);
                        o.push(q[1] - p[1]);
                    }
                }
                Value::Real(o)
            })
            .collect()
    }

    fn sample_layout(&self, episode_seed: u64) -> Result<CoopNavState, EnvError> {
        let mut rng = seed::rng(&[self.config.seed, episode_seed]);
        let point = |rng: &mut seed::ArenaRng| {
            [
                rng.random_range(-SPAWN_HALF_EXTENT..=SPAWN_HALF_EXTENT),
                rng.random_range(-SPAWN_HALF_EXTENT..=SPAWN_HALF_EXTENT),
            ]
        };
        let mut targets = None;
        for _ in 0..MAX_LAYOUT_ATTEMPTS {
            let candidate: Vec<[f64; 2]> = (0..self.config.n_targets).map(|_| point(&mut rng)).collect();
            let separated = candidate.iter().enumerate().all(|(i, &a)| {
                candidate[i + 1..].iter().all(|&b| dist(a, b) >= self.config.min_target_separation)
            });
            if separated {
                targets = Some(candidate);
                break;
            }
        }
        let target_pos = targets.ok_or(EnvError::SamplingFailure(MAX_LAYOUT_ATTEMPTS))?;
        let agent_pos = (0..self.config.n_agents).map(|_| point(&mut rng)).collect();
        Ok(CoopNavState {
            agent_pos,
            agent_vel: vec![[0.0; 2]; self.config.n_agents],
            target_pos,
            t: 0,
        })
    }
}

impl Environment for CoopNav {
    fn entity_specs(&self) -> &[EntitySpec] {
        &self.specs
    }

    fn reset(&mut self, episode_seed: u64) -> Result<Vec<Value>, EnvError> {
        self.state = Some(self.sample_layout(episode_seed)?);
        Ok(self.observations())
    }

    fn step(&mut self, actions: &[Value]) -> Result<StepBatch, EnvError> {
        let actions = canonical_actions(&self.specs, actions)?;
        let c = &self.config;
        let s = self.state.as_mut().ok_or(EnvError::NotReset)?;
        if s.t >= c.episode_len {
            return Err(EnvError::StepAfterDone);
        }
        for (i, a) in actions.iter().enumerate() {
            let Value::Real(a) = a else { unreachable!("box action space") };
            let v = &mut s.agent_vel[i];
            v[0] = c.velocity_damping * v[0] + c.accel_gain * a[0];
            v[1] = c.velocity_damping * v[1] + c.accel_gain * a[1];
            let speed = v[0].hypot(v[1]);
            if speed > c.max_speed {
                let k = c.max_speed / speed;
                v[0] *= k;
                v[1] *= k;
            }
            let p = &mut s.agent_pos[i];
            p[0] = (p[0] + v[0]).clamp(-c.world_half_extent, c.world_half_extent);
            p[1] = (p[1] + v[1]).clamp(-c.world_half_extent, c.world_half_extent);
        }
        s.t += 1;
        let occupied = occupancy_count(&s.agent_pos, &s.target_pos, c.occupancy_radius) as f64;
        let collisions = collision_count(&s.agent_pos, c.agent_radius);
        let rewards = collisions
            .iter()
            .map(|&k| occupied - c.collision_penalty_weight * k as f64)
            .collect();
        let done = s.t == c.episode_len;
        let mut info = Info::new();
        if done {
            info.insert(INFO_TRUNCATED.into(), "true".into());
        }
        Ok(StepBatch {
            observations: self.observations(),
            rewards,
            done,
            infos: vec![info; self.config.n_agents],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn zeros() -> Vec<Value> {
        vec![Value::Real(vec![0.0, 0.0]); 3]
    }

    fn still_state(agents: Vec<[f64; 2]>, targets: Vec<[f64; 2]>) -> CoopNavState {
        CoopNavState { agent_vel: vec![[0.0; 2]; agents.len()], agent_pos: agents, target_pos: targets, t: 0 }
    }

    #[test]
    fn reset_layout() {
        let mut env = CoopNav::new(CoopNavConfig::default()).unwrap();
        let obs = env.reset(17).unwrap();
        assert_eq!(obs.len(), 3);
        for o in &obs {
            let Value::Real(o) = o else { panic!() };
            assert_eq!(o.len(), 14);
            assert_eq!(o[2], 0.0);
            assert_eq!(o[3], 0.0);
        }
        let mut again = CoopNav::new(CoopNavConfig::default()).unwrap();
        assert_eq!(again.reset(17).unwrap(), obs);
        assert_ne!(again.reset(18).unwrap(), obs);
    }

    #[test]
    fn target_separation_holds_over_many_seeds() {
        let mut env = CoopNav::new(CoopNavConfig::default()).unwrap();
        for s in 0..500 {
            env.reset(s).unwrap();
            let t = &env.state().unwrap().target_pos;
            for i in 0..3 {
                for j in i + 1..3 {
                    assert!(dist(t[i], t[j]) >= 0.3, "seed {s}");
                }
            }
        }
    }

    #[test]
    fn impossible_separation_fails() {
        let cfg = CoopNavConfig { min_target_separation: 5.0, ..Default::default() };
        let mut env = CoopNav::new(cfg).unwrap();
        assert_eq!(env.reset(0), Err(EnvError::SamplingFailure(1000)));
    }

    #[test]
    fn occupancy_examples() {
        let targets = vec![[0.5, 0.5], [-0.5, 0.5], [0.0, -0.5]];
        assert_eq!(occupancy_count(&targets.clone(), &targets, 0.1), 3);
        assert_eq!(occupancy_count(&[[0.5, 0.5]; 3], &targets, 0.1), 1);
        // 0.125 is exact in binary, so the boundary case is exact
        let r = 0.125;
        assert_eq!(occupancy_count(&[[0.5 + r, 0.5], [9.0, 9.0], [9.0, 9.0]], &targets, r), 1);
        assert_eq!(occupancy_count(&[[0.5 + r + 1e-9, 0.5], [9.0, 9.0], [9.0, 9.0]], &targets, r), 0);
        // one agent between two close targets covers both
        assert_eq!(occupancy_count(&[[0.0, 0.0]], &[[0.05, 0.0], [-0.05, 0.0]], 0.1), 2);
    }

    #[test]
    fn collision_examples() {
        assert_eq!(collision_count(&[[0.0, 0.0], [0.5, 0.0], [-0.5, 0.0]], 0.05), vec![0, 0, 0]);
        assert_eq!(collision_count(&[[0.0, 0.0], [0.0, 0.0], [-0.5, 0.0]], 0.05), vec![1, 1, 0]);
        assert_eq!(collision_count(&[[0.2, 0.2]; 3], 0.05), vec![2, 2, 2]);
    }

    #[test]
    fn full_occupancy_rewards_three_each() {
        let targets = vec![[0.5, 0.5], [-0.5, 0.5], [0.0, -0.5]];
        let mut env = CoopNav::from_state(CoopNavConfig::default(), still_state(targets.clone(), targets)).unwrap();
        let mut total = 0.0;
        for t in 0..300 {
            let b = env.step(&zeros()).unwrap();
            assert_eq!(b.rewards, vec![3.0, 3.0, 3.0]);
            assert_eq!(b.done, t == 299);
            total += b.rewards[0];
        }
        assert_eq!(total, 900.0);
        assert_eq!(env.step(&zeros()), Err(EnvError::StepAfterDone));
    }

    #[test]
    fn no_agent_near_targets_gives_zero() {
        let mut env = CoopNav::from_state(
            CoopNavConfig::default(),
            still_state(vec![[0.9, 0.9], [0.9, -0.9], [-0.9, -0.9]], vec![[0.0, 0.0], [0.3, 0.0], [0.0, 0.3]]),
        )
        .unwrap();
        assert_eq!(env.step(&zeros()).unwrap().rewards, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn collision_penalty_applies_per_member() {
        // agents 0 and 1 coincide on target 0; agent 2 is alone, far from targets
        let cfg = CoopNavConfig { collision_penalty_weight: 0.3, ..Default::default() };
        let state = still_state(
            vec![[0.5, 0.5], [0.5, 0.5], [-0.9, -0.9]],
            vec![[0.5, 0.5], [-0.5, 0.5], [0.0, -0.5]],
        );
        let mut env = CoopNav::from_state(cfg, state.clone()).unwrap();
        let rewards = env.step(&zeros()).unwrap().rewards;
        // brute force: occupancy and pairwise overlaps from the post-step state
        let post = &env.state().unwrap().agent_pos;
        let occ = state
            .target_pos
            .iter()
            .filter(|t| post.iter().any(|a| ((a[0] - t[0]).powi(2) + (a[1] - t[1]).powi(2)).sqrt() <= 0.1))
            .count() as f64;
        let expected: Vec<f64> = (0..3)
            .map(|i| {
                let hits = (0..3)
                    .filter(|&j| j != i && ((post[i][0] - post[j][0]).powi(2) + (post[i][1] - post[j][1]).powi(2)).sqrt() <= 0.1)
                    .count();
                occ - 0.3 * hits as f64
            })
            .collect();
        assert_eq!(rewards, expected);
        assert_eq!(rewards, vec![1.0 - 0.3, 1.0 - 0.3, 1.0]);
    }

    #[test]
    fn invalid_actions_rejected() {
        let mut env = CoopNav::new(CoopNavConfig::default()).unwrap();
        assert_eq!(env.step(&zeros()), Err(EnvError::NotReset));
        env.reset(0).unwrap();
        let bad = vec![Value::Real(vec![0.0, 2.0]), Value::Real(vec![0.0, 0.0]), Value::Null];
        assert_eq!(env.step(&bad), Err(EnvError::InvalidAction(0)));
        assert_eq!(env.step(&zeros()[..2]), Err(EnvError::ActionCount { expected: 3, got: 2 }));
        // nulls become the zero action
        let with_null = vec![Value::Null, Value::Real(vec![0.0, 0.0]), Value::Null];
        assert!(env.step(&with_null).is_ok());
    }

    proptest! {
        #[test]
        fn dynamics_respect_bounds(seed in any::<u64>(), acts in proptest::collection::vec(-1.0f64..=1.0, 6 * 40)) {
            let mut env = CoopNav::new(CoopNavConfig::default()).unwrap();
            env.reset(seed).unwrap();
            for chunk in acts.chunks(6) {
                let a: Vec<Value> = chunk.chunks(2).map(|c| Value::Real(c.to_vec())).collect();
                let b = env.step(&a).unwrap();
                let s = env.state().unwrap();
                for (p, v) in s.agent_pos.iter().zip(&s.agent_vel) {
                    prop_assert!(p[0].abs() <= 1.0 && p[1].abs() <= 1.0);
                    prop_assert!(v[0].hypot(v[1]) <= 0.1 + 1e-12);
                }
                // w = 0: everyone shares the occupancy reward
                prop_assert!(b.rewards.iter().all(|r| *r == b.rewards[0]));
                prop_assert!(b.rewards[0] <= 3.0);
            }
        }
    }
}
