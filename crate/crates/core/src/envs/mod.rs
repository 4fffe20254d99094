//! Built-in multi-entity environments.

mod cart_pole;
mod coop_nav;
mod echo;

pub use cart_pole::{CartPole, CartPoleConfig, CartPoleState};
pub use coop_nav::{collision_count, occupancy_count, CoopNav, CoopNavConfig, CoopNavState};
pub use echo::{Echo, EchoConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interface::{EntitySpec, StepBatch, Value};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("step called after the episode ended")]
    StepAfterDone,
    #[error("step called before reset")]
    NotReset,
    #[error("could not sample a valid layout after {0} attempts")]
    SamplingFailure(usize),
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("action for entity {0} is outside its space")]
    InvalidAction(usize),
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("environment has no parameter '{0}'")]
    UnknownParam(String),
}

/// Lock-step multi-entity environment.
///
/// `step` takes one action per entity (in entity-id order) and returns one
/// batch. Null actions are substituted with the canonical null action before
/// they reach an implementation.
pub trait Environment: Send {
    fn entity_specs(&self) -> &[EntitySpec];
    fn reset(&mut self, episode_seed: u64) -> Result<Vec<Value>, EnvError>;
    fn step(&mut self, actions: &[Value]) -> Result<StepBatch, EnvError>;
}

/// Replaces nulls with canonical null actions and checks membership.
pub(crate) fn canonical_actions(specs: &[EntitySpec], actions: &[Value]) -> Result<Vec<Value>, EnvError> {
    if actions.len() != specs.len() {
        return Err(EnvError::ActionCount { expected: specs.len(), got: actions.len() });
    }
    specs
        .iter()
        .zip(actions)
        .map(|(spec, a)| {
            if a.is_null() {
                Ok(spec.act_space.null_action())
            } else if spec.act_space.contains(a) {
                Ok(a.clone())
            } else {
                Err(EnvError::InvalidAction(spec.entity_id))
            }
        })
        .collect()
}

/// Declarative environment selection, as it appears in run configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvConfig {
    CoopNav(CoopNavConfig),
    Echo(EchoConfig),
    CartPole(CartPoleConfig),
}

impl EnvConfig {
    pub fn kind_name(&self) -> &'static str {
        match self {
            EnvConfig::CoopNav(_) => "coop_nav",
            EnvConfig::Echo(_) => "echo",
            EnvConfig::CartPole(_) => "cart_pole",
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        match self {
            EnvConfig::CoopNav(c) => c.validate(),
            EnvConfig::Echo(c) => c.validate(),
            EnvConfig::CartPole(c) => c.validate(),
        }
    }

    pub fn entity_specs(&self) -> Vec<EntitySpec> {
        match self {
            EnvConfig::CoopNav(c) => c.entity_specs(),
            EnvConfig::Echo(c) => c.entity_specs(),
            EnvConfig::CartPole(_) => CartPole::specs(),
        }
    }

    pub fn entity_count(&self) -> usize {
        match self {
            EnvConfig::CoopNav(c) => c.n_agents,
            EnvConfig::Echo(c) => c.n_entities,
            EnvConfig::CartPole(_) => 1,
        }
    }

    pub fn build(&self) -> Result<Box<dyn Environment>, EnvError> {
        self.validate()?;
        Ok(match self {
            EnvConfig::CoopNav(c) => Box::new(CoopNav::new(c.clone())?),
            EnvConfig::Echo(c) => Box::new(Echo::new(c.clone())?),
            EnvConfig::CartPole(c) => Box::new(CartPole::new(c.clone())),
        })
    }

    /// Named scalar parameter, used by schedules that vary env settings per round.
    pub fn param(&self, key: &str) -> Option<f64> {
        match (self, key) {
            (EnvConfig::CoopNav(c), "collision_penalty_weight") => Some(c.collision_penalty_weight),
            (EnvConfig::CoopNav(c), "occupancy_radius") => Some(c.occupancy_radius),
            _ => None,
        }
    }

    pub fn set_param(&mut self, key: &str, value: f64) -> Result<(), EnvError> {
        match (&mut *self, key) {
            (EnvConfig::CoopNav(c), "collision_penalty_weight") => c.collision_penalty_weight = value,
            (EnvConfig::CoopNav(c), "occupancy_radius") => c.occupancy_radius = value,
            _ => return Err(EnvError::UnknownParam(key.to_string())),
        }
        self.validate()
    }
}
