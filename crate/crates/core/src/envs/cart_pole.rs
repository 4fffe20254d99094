//! Classic cart-pole balancing, single entity, explicit Euler integration.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{canonical_actions, EnvError, Environment};
use crate::interface::{EntitySpec, Info, SpaceSpec, StepBatch, Value, INFO_TRUNCATED};
use crate::seed;

const GRAVITY: f64 = 9.8;
const CART_MASS: f64 = 1.0;
const POLE_MASS: f64 = 0.1;
const HALF_LENGTH: f64 = 0.5;
const FORCE: f64 = 10.0;
const DT: f64 = 0.02;
const X_LIMIT: f64 = 2.4;
const THETA_LIMIT: f64 = 12.0 * 2.0 * std::f64::consts::PI / 360.0;
const OBS_BOUND: f64 = 1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CartPoleConfig {
    pub max_steps: u32,
}

impl Default for CartPoleConfig {
    fn default() -> Self {
        CartPoleConfig { max_steps: 500 }
    }
}

impl CartPoleConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.max_steps == 0 {
            return Err(EnvError::InvalidConfig("max_steps must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartPoleState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
    pub t: u32,
}

impl CartPoleState {
    fn obs(&self) -> Value {
        Value::Real(vec![self.x, self.x_dot, self.theta, self.theta_dot])
    }

    fn out_of_bounds(&self) -> bool {
        self.x.abs() > X_LIMIT || self.theta.abs() > THETA_LIMIT
    }
}

pub struct CartPole {
    config: CartPoleConfig,
    specs: Vec<EntitySpec>,
    state: Option<CartPoleState>,
    ended: bool,
}

impl CartPole {
    pub fn new(config: CartPoleConfig) -> Self {
        CartPole { config, specs: Self::specs(), state: None, ended: false }
    }

    pub fn specs() -> Vec<EntitySpec> {
        vec![EntitySpec {
            entity_id: 0,
            obs_space: SpaceSpec::boxed(&[4], -OBS_BOUND, OBS_BOUND),
            act_space: SpaceSpec::discrete(2),
        }]
    }

    pub fn from_state(config: CartPoleConfig, state: CartPoleState) -> Self {
        CartPole { state: Some(state), ..CartPole::new(config) }
    }

    pub fn state(&self) -> Option<CartPoleState> {
        self.state
    }
}

impl Environment for CartPole {
    fn entity_specs(&self) -> &[EntitySpec] {
        &self.specs
    }

    fn reset(&mut self, episode_seed: u64) -> Result<Vec<Value>, EnvError> {
        let mut rng = seed::rng(&[episode_seed]);
        let mut u = || rng.random_range(-0.05..=0.05);
        let s = CartPoleState { x: u(), x_dot: u(), theta: u(), theta_dot: u(), t: 0 };
        self.state = Some(s);
        self.ended = false;
        Ok(vec![s.obs()])
    }

    fn step(&mut self, actions: &[Value]) -> Result<StepBatch, EnvError> {
        let actions = canonical_actions(&self.specs, actions)?;
        let s = self.state.as_mut().ok_or(EnvError::NotReset)?;
        if self.ended || s.t >= self.config.max_steps {
            return Err(EnvError::StepAfterDone);
        }
        let force = if actions[0] == Value::Discrete(1) { FORCE } else { -FORCE };
        let total_mass = CART_MASS + POLE_MASS;
        let pole_moment = POLE_MASS * HALF_LENGTH;
        let (sin, cos) = s.theta.sin_cos();
        let temp = (force + pole_moment * s.theta_dot * s.theta_dot * sin) / total_mass;
        let theta_acc =
            (GRAVITY * sin - cos * temp) / (HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / total_mass));
        let x_acc = temp - pole_moment * theta_acc * cos / total_mass;
        s.x += DT * s.x_dot;
        s.x_dot += DT * x_acc;
        s.theta += DT * s.theta_dot;
        s.theta_dot += DT * theta_acc;
        s.t += 1;

        let failed = s.out_of_bounds();
        let timed_out = s.t >= self.config.max_steps;
        let done = failed || timed_out;
        self.ended = done;
        let mut info = Info::new();
        if timed_out && !failed {
            info.insert(INFO_TRUNCATED.into(), "true".into());
        }
        Ok(StepBatch { observations: vec![s.obs()], rewards: vec![1.0], done, infos: vec![info] })
    }
}
