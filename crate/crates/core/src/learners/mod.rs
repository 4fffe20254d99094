//! Learning algorithms and the agent abstraction that workers drive.
//!
//! A worker owns one [`Agent`]. Trainable agents update in phases so that
//! every phase's gradient can be averaged across the policy group before it
//! is applied: `begin_update` fixes the minibatches, then for each phase the
//! worker submits `phase_gradient`, receives the group mean, and hands it to
//! `apply_phase`.

pub mod adam;
pub mod checkpoint;
pub mod collective;
pub mod combined;
pub mod dist;
pub mod masac;
pub mod mlp;
pub mod ppo;
pub mod replay;
pub mod sac;
pub mod scripted;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interface::{EntitySpec, SpaceSpec, Value};
use crate::seed::ArenaRng;
use checkpoint::{Checkpoint, CheckpointError};
use dist::ActionBounds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Ppo,
    /// Independent SAC; one worker per entity.
    Sac,
    /// SAC over a grouped worker whose entities are fused into one agent.
    SacCombined,
    /// Per-entity actors with one common critic over the group.
    Masac,
}

impl Algorithm {
    pub fn tag(self) -> &'static str {
        match self {
            Algorithm::Ppo => "ppo",
            Algorithm::Sac => "sac",
            Algorithm::SacCombined => "sac_combined",
            Algorithm::Masac => "masac",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        [Algorithm::Ppo, Algorithm::Sac, Algorithm::SacCombined, Algorithm::Masac].into_iter().find(|a| a.tag() == tag)
    }

    /// Whether the algorithm expects a grouped (multi-entity) assignment.
    pub fn needs_group(self) -> bool {
        matches!(self, Algorithm::Masac)
    }

    pub fn needs_single(self) -> bool {
        matches!(self, Algorithm::Ppo | Algorithm::Sac)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedKind {
    Static,
    Random,
}

/// How a policy produces actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyKind {
    Trainable {
        algorithm: Algorithm,
        #[serde(default)]
        hyper: HyperParams,
    },
    Frozen {
        checkpoint: String,
    },
    Scripted {
        behavior: ScriptedKind,
    },
}

impl PolicyKind {
    pub fn is_trainable(&self) -> bool {
        matches!(self, PolicyKind::Trainable { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub alpha: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Env steps of uniform random acting before the first update of a fresh policy.
    pub warmup: u64,
    /// Updates happen every `update_every` env steps...
    pub update_every: u64,
    /// ...and each performs this many gradient steps.
    pub gradient_steps: u64,
    pub ppo_horizon: usize,
    pub ppo_epochs: usize,
    pub ppo_minibatch: usize,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            actor_hidden: vec![64, 64],
            critic_hidden: vec![128, 128],
            lr: 3e-4,
            gamma: 0.99,
            tau: 0.005,
            alpha: 0.05,
            batch_size: 256,
            replay_capacity: 100_000,
            warmup: 1000,
            update_every: 1,
            gradient_steps: 1,
            ppo_horizon: 2048,
            ppo_epochs: 10,
            ppo_minibatch: 64,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("batch_size", self.batch_size),
            ("replay_capacity", self.replay_capacity),
            ("ppo_horizon", self.ppo_horizon),
            ("ppo_epochs", self.ppo_epochs),
            ("ppo_minibatch", self.ppo_minibatch),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(format!("{k} must be >= 1"));
        }
        if self.update_every == 0 || self.gradient_steps == 0 {
            return Err("update_every and gradient_steps must be >= 1".into());
        }
        if self.actor_hidden.contains(&0) || self.critic_hidden.contains(&0) {
            return Err("hidden layer sizes must be >= 1".into());
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.tau) {
            return Err("lr must be > 0, gamma and tau within [0, 1]".into());
        }
        if !(self.alpha >= 0.0) || !(self.clip_eps > 0.0) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err("alpha must be >= 0, clip_eps > 0, gae_lambda within [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LearnerError {
    #[error("buffer is empty")]
    EmptyBuffer,
    #[error("not enough data: have {have}, need {need}")]
    InsufficientData { have: usize, need: usize },
    #[error("algorithm needs a grouped assignment")]
    NotGrouped,
    #[error("algorithm needs a single-entity assignment")]
    NotSingle,
    #[error("unsupported space for {algorithm}: {reason}")]
    UnsupportedSpace { algorithm: &'static str, reason: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// One lock-step exchange as seen by an agent, over its own entities.
#[derive(Debug, Clone)]
pub struct Experience<'a> {
    pub obs: &'a [Value],
    pub actions: &'a [Value],
    pub rewards: &'a [f64],
    /// Observation after the step; the terminal observation when `done`.
    pub next_obs: &'a [Value],
    pub done: bool,
    /// Episode ended by a time limit; bootstrapping continues through it.
    pub truncated: bool,
}

impl Experience<'_> {
    /// True when value bootstrapping must stop at this transition.
    pub fn terminal(&self) -> bool {
        self.done && !self.truncated
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub loss_policy: f64,
    pub loss_value: f64,
    pub entropy: f64,
}

/// Anything that can control a worker's entities.
pub trait Agent: Send {
    fn act(&mut self, obs: &[Value], rng: &mut ArenaRng) -> Vec<Value>;

    fn observe(&mut self, _exp: &Experience) {}

    /// Whether a (group-wide) update should run now.
    fn wants_update(&self) -> bool {
        false
    }

    /// Draws minibatches and noise for one update; returns the phase count.
    fn begin_update(&mut self, _rng: &mut ArenaRng) -> usize {
        0
    }

    fn phase_gradient(&mut self, _phase: usize) -> Vec<f64> {
        Vec::new()
    }

    fn apply_phase(&mut self, _phase: usize, _mean_grad: &[f64]) {}

    fn end_update(&mut self) -> UpdateStats {
        UpdateStats::default()
    }

    /// Number of completed updates; only trainable agents advance it.
    fn version(&self) -> u64 {
        0
    }

    fn checkpoint(&self) -> Option<Checkpoint> {
        None
    }
}

/// Joint action bounds of a list of box spaces.
pub fn box_bounds(spaces: &[&SpaceSpec], algorithm: &'static str) -> Result<ActionBounds, LearnerError> {
    let parts = spaces
        .iter()
        .map(|s| match s {
            SpaceSpec::Box { shape, low, high } => Ok(ActionBounds::uniform(shape.iter().product(), *low, *high)),
            SpaceSpec::Discrete { .. } => {
                Err(LearnerError::UnsupportedSpace { algorithm, reason: "continuous actions required".into() })
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ActionBounds::concat(&parts))
}

/// Concatenated features of a list of observations.
pub fn features(obs: &[Value], specs: &[EntitySpec]) -> Vec<f64> {
    obs.iter().zip(specs).flat_map(|(o, s)| o.to_features(s.obs_space.flat_dim())).collect()
}

/// Builds the agent that a worker runs for `policy`.
///
/// `specs` are the worker's entities in assignment order; `grouped` tells
/// whether the assignment was a group. A checkpoint, when given, restores
/// parameters from a previous round.
pub fn build_agent(
    policy: &str,
    kind: &PolicyKind,
    specs: &[EntitySpec],
    grouped: bool,
    init_seed: u64,
    restore: Option<&Checkpoint>,
) -> Result<Box<dyn Agent>, LearnerError> {
    match kind {
        PolicyKind::Scripted { behavior } => Ok(Box::new(scripted::ScriptedAgent::new(*behavior, specs))),
        PolicyKind::Frozen { .. } => {
            let ckpt = restore.ok_or(CheckpointError::Missing)?;
            let algorithm = Algorithm::from_tag(&ckpt.algorithm).ok_or(CheckpointError::AlgorithmTag {
                expected: "known algorithm".into(),
                got: ckpt.algorithm.clone(),
            })?;
            let mut agent = trainable(policy, algorithm, &hyper_from_checkpoint(ckpt), specs, grouped, init_seed, Some(ckpt))?;
            agent.freeze();
            Ok(agent.into_agent())
        }
        PolicyKind::Trainable { algorithm, hyper } => {
            Ok(trainable(policy, *algorithm, hyper, specs, grouped, init_seed, restore)?.into_agent())
        }
    }
}

/// Hidden sizes recovered from stored shapes: the first network is an
/// actor, the first single-output network a critic or value head.
fn hyper_from_checkpoint(ckpt: &Checkpoint) -> HyperParams {
    let hidden = |sizes: &Vec<usize>| sizes[1..sizes.len() - 1].to_vec();
    let mut h = HyperParams::default();
    let nets: Vec<&Vec<usize>> = ckpt.nets.iter().filter(|n| n.len() >= 2).collect();
    if let Some(a) = nets.first() {
        h.actor_hidden = hidden(a);
    }
    if let Some(c) = nets.iter().skip(1).find(|n| n.last() == Some(&1)) {
        h.critic_hidden = hidden(c);
    }
    h
}

enum Trainable {
    Ppo(ppo::PpoLearner),
    Sac(sac::SacLearner),
    Combined(combined::CombinedSac),
    Masac(masac::MasacLearner),
}

impl Trainable {
    fn freeze(&mut self) {
        match self {
            Trainable::Ppo(l) => l.freeze(),
            Trainable::Sac(l) => l.freeze(),
            Trainable::Combined(l) => l.freeze(),
            Trainable::Masac(l) => l.freeze(),
        }
    }

    fn into_agent(self) -> Box<dyn Agent> {
        match self {
            Trainable::Ppo(l) => Box::new(l),
            Trainable::Sac(l) => Box::new(l),
            Trainable::Combined(l) => Box::new(l),
            Trainable::Masac(l) => Box::new(l),
        }
    }
}

fn trainable(
    policy: &str,
    algorithm: Algorithm,
    hyper: &HyperParams,
    specs: &[EntitySpec],
    grouped: bool,
    init_seed: u64,
    restore: Option<&Checkpoint>,
) -> Result<Trainable, LearnerError> {
    if algorithm.needs_group() && !grouped {
        return Err(LearnerError::NotGrouped);
    }
    if algorithm.needs_single() && (grouped || specs.len() != 1) {
        return Err(LearnerError::NotSingle);
    }
    let mut rng = crate::seed::rng(&[init_seed]);
    let mut t = match algorithm {
        Algorithm::Ppo => Trainable::Ppo(ppo::PpoLearner::new(policy, hyper.clone(), &specs[0], &mut rng)?),
        Algorithm::Sac => Trainable::Sac(sac::SacLearner::new(policy, hyper.clone(), &specs[0], &mut rng)?),
        Algorithm::SacCombined => Trainable::Combined(combined::CombinedSac::new(policy, hyper.clone(), specs, &mut rng)?),
        Algorithm::Masac => Trainable::Masac(masac::MasacLearner::new(policy, hyper.clone(), specs, &mut rng)?),
    };
    if let Some(ckpt) = restore {
        match &mut t {
            Trainable::Ppo(l) => l.restore(ckpt)?,
            Trainable::Sac(l) => l.restore(ckpt, Algorithm::Sac)?,
            Trainable::Combined(l) => l.restore(ckpt)?,
            Trainable::Masac(l) => l.restore(ckpt)?,
        }
    }
    Ok(t)
}

/// Runs every pending update of a lone agent, with the group mean of one
/// member being its own gradient.
pub fn update_solo(agent: &mut dyn Agent, rng: &mut ArenaRng) -> Vec<UpdateStats> {
    let mut stats = vec![];
    while agent.wants_update() {
        let phases = agent.begin_update(rng);
        for p in 0..phases {
            let g = agent.phase_gradient(p);
            agent.apply_phase(p, &g);
        }
        stats.push(agent.end_update());
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn algorithm_tags_round_trip() {
        for a in [Algorithm::Ppo, Algorithm::Sac, Algorithm::SacCombined, Algorithm::Masac] {
            assert_eq!(Algorithm::from_tag(a.tag()), Some(a));
        }
        assert_eq!(Algorithm::from_tag("dqn"), None);
    }

    #[test]
    fn policy_kind_json() {
        let k: PolicyKind = serde_json::from_str(r#"{"kind":"trainable","algorithm":"masac"}"#).unwrap();
        assert_eq!(k, PolicyKind::Trainable { algorithm: Algorithm::Masac, hyper: HyperParams::default() });
        let s: PolicyKind = serde_json::from_str(r#"{"kind":"scripted","behavior":"random"}"#).unwrap();
        assert!(!s.is_trainable());
        assert!(serde_json::from_str::<PolicyKind>(r#"{"kind":"trainable","algorithm":"sac","x":1}"#).is_err());
    }

    #[test]
    fn hyper_validation() {
        assert!(HyperParams::default().validate().is_ok());
        let bad = HyperParams { batch_size: 0, ..Default::default() };
        assert!(bad.validate().unwrap_err().contains("batch_size"));
    }
}
