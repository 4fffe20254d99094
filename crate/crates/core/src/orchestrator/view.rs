//! Learner-facing views of a worker's slice of a shared environment.
//!
//! A [`GroupView`] presents a worker's entities as lists; a [`ProxyView`]
//! narrows a single-entity assignment to the usual single-agent
//! reset/step interface. Auto-resets done by the env server stay hidden:
//! a finished step returns the terminal observation and the next `reset`
//! hands out the observation the server already reset to.

use std::collections::BTreeMap;

use crate::envs::EnvConfig;
use crate::interface::{EntitySpec, Info, StepBatch, Value, INFO_TERMINAL_OBS};
use crate::learners::combined::{combine_observations, combine_rewards, split_action};

use super::server::EnvServer;
use super::OrchestratorError;

/// A worker's connection to its env group.
pub trait EnvLink {
    /// Specs of this worker's entities, in assignment order.
    fn specs(&self) -> &[EntitySpec];
    /// First exchange of the round; carries the initial observations.
    fn open(&mut self) -> Result<StepBatch, OrchestratorError>;
    fn exchange(&mut self, actions: Vec<Value>) -> Result<StepBatch, OrchestratorError>;
}

/// In-process link to an [`EnvServer`]. Other members of the env group, if
/// any, send null actions. Replies pass through the frame encoding.
pub struct DirectLink {
    server: EnvServer,
    me: usize,
    specs: Vec<EntitySpec>,
}

impl DirectLink {
    /// Serves `env` for a worker commanding `entities`; the remaining
    /// entities go to one idle member. The link never runs out of budget.
    pub fn new(env: &EnvConfig, entities: &[usize], run_seed: u64, env_id: usize) -> Result<Self, OrchestratorError> {
        let all = env.entity_specs();
        let rest: Vec<usize> = (0..all.len()).filter(|e| !entities.contains(e)).collect();
        let mut members = vec![(0, entities.to_vec())];
        if !rest.is_empty() {
            members.push((1, rest));
        }
        let server = EnvServer::new(env_id, env, members, run_seed, 0, u64::MAX)?;
        let specs = entities.iter().map(|&e| all[e].clone()).collect();
        Ok(DirectLink { server, me: 0, specs })
    }

    fn mine(&self, replies: Vec<super::server::WorkerReply>) -> Result<StepBatch, OrchestratorError> {
        let r = replies.into_iter().find(|r| r.worker == self.me).expect("link worker is a member");
        Ok(StepBatch::from_frame(&r.batch.to_frame())?)
    }
}

impl EnvLink for DirectLink {
    fn specs(&self) -> &[EntitySpec] {
        &self.specs
    }

    fn open(&mut self) -> Result<StepBatch, OrchestratorError> {
        let r = self.server.start()?;
        self.mine(r)
    }

    fn exchange(&mut self, actions: Vec<Value>) -> Result<StepBatch, OrchestratorError> {
        let mut msgs = BTreeMap::new();
        for (w, ids) in self.server.members() {
            msgs.insert(*w, if *w == self.me { actions.clone() } else { vec![Value::Null; ids.len()] });
        }
        let r = self.server.serve(&msgs)?;
        self.mine(r)
    }
}

/// Result of one step of a list view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewStep {
    pub obs: Vec<Value>,
    pub rewards: Vec<f64>,
    pub done: bool,
    pub infos: Vec<Info>,
}

impl ViewStep {
    pub fn to_batch(&self) -> StepBatch {
        StepBatch { observations: self.obs.clone(), rewards: self.rewards.clone(), done: self.done, infos: self.infos.clone() }
    }
}

/// Multi-entity reset/step interface.
pub trait EntityView {
    fn specs(&self) -> &[EntitySpec];
    fn reset(&mut self) -> Result<Vec<Value>, OrchestratorError>;
    fn step(&mut self, actions: Vec<Value>) -> Result<ViewStep, OrchestratorError>;
}

enum Phase {
    Unopened,
    Running,
    /// Episode over; holds the observations the env reset to.
    Finished(Vec<Value>),
    /// Reset observations handed out; waiting for the first step.
    Ready,
}

/// List view over a worker's entities, in assignment order.
pub struct GroupView<L: EnvLink> {
    link: L,
    phase: Phase,
}

impl<L: EnvLink> GroupView<L> {
    pub fn new(link: L) -> Self {
        GroupView { link, phase: Phase::Unopened }
    }
}

impl<L: EnvLink> EntityView for GroupView<L> {
    fn specs(&self) -> &[EntitySpec] {
        self.link.specs()
    }

    fn reset(&mut self) -> Result<Vec<Value>, OrchestratorError> {
        let obs = match std::mem::replace(&mut self.phase, Phase::Ready) {
            Phase::Unopened => self.link.open()?.observations,
            Phase::Finished(obs) => obs,
            Phase::Running | Phase::Ready => {
                return Err(OrchestratorError::ProtocolViolation("reset in the middle of a shared episode".into()));
            }
        };
        Ok(obs)
    }

    fn step(&mut self, actions: Vec<Value>) -> Result<ViewStep, OrchestratorError> {
        if !matches!(self.phase, Phase::Running | Phase::Ready) {
            return Err(OrchestratorError::ProtocolViolation("step before reset".into()));
        }
        let width = self.link.specs().len();
        if actions.len() != width {
            return Err(OrchestratorError::LengthMismatch { expected: width, got: actions.len() });
        }
        let mut b = self.link.exchange(actions)?;
        if b.done {
            let mut terminal = Vec::with_capacity(width);
            for (info, o) in b.infos.iter_mut().zip(&b.observations) {
                let t = match info.remove(INFO_TERMINAL_OBS) {
                    Some(text) => Value::from_info_text(&text)
                        .ok_or_else(|| OrchestratorError::ProtocolViolation("unreadable terminal observation".into()))?,
                    None => o.clone(),
                };
                terminal.push(t);
            }
            let reset_obs = std::mem::replace(&mut b.observations, terminal);
            self.phase = Phase::Finished(reset_obs);
        } else {
            self.phase = Phase::Running;
        }
        Ok(ViewStep { obs: b.observations, rewards: b.rewards, done: b.done, infos: b.infos })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyStep {
    pub obs: Value,
    pub reward: f64,
    pub done: bool,
    pub info: Info,
}

/// Single-agent interface over a single-entity assignment.
pub struct ProxyView<L: EnvLink> {
    inner: GroupView<L>,
}

impl<L: EnvLink> ProxyView<L> {
    pub fn new(link: L) -> Result<Self, OrchestratorError> {
        if link.specs().len() != 1 {
            return Err(OrchestratorError::LengthMismatch { expected: 1, got: link.specs().len() });
        }
        Ok(ProxyView { inner: GroupView::new(link) })
    }

    pub fn spec(&self) -> &EntitySpec {
        &self.inner.specs()[0]
    }

    pub fn reset(&mut self) -> Result<Value, OrchestratorError> {
        Ok(self.inner.reset()?.remove(0))
    }

    pub fn step(&mut self, action: Value) -> Result<ProxyStep, OrchestratorError> {
        let mut s = self.inner.step(vec![action])?;
        Ok(ProxyStep { obs: s.obs.remove(0), reward: s.rewards[0], done: s.done, info: s.infos.remove(0) })
    }
}

/// Asks the learner for a decision only every `k` exchanges, repeating it
/// in between. Rewards of the repeated exchanges are summed into the
/// decision's reward; a finished episode ends the interval early.
pub struct FrameSkip<V: EntityView> {
    inner: V,
    k: usize,
}

impl<V: EntityView> FrameSkip<V> {
    pub fn new(inner: V, k: usize) -> Result<Self, OrchestratorError> {
        if k == 0 {
            return Err(OrchestratorError::ProtocolViolation("frame-skip interval must be >= 1".into()));
        }
        Ok(FrameSkip { inner, k })
    }

    pub fn inner(&self) -> &V {
        &self.inner
    }
}

impl<V: EntityView> EntityView for FrameSkip<V> {
    fn specs(&self) -> &[EntitySpec] {
        self.inner.specs()
    }

    fn reset(&mut self) -> Result<Vec<Value>, OrchestratorError> {
        self.inner.reset()
    }

    fn step(&mut self, actions: Vec<Value>) -> Result<ViewStep, OrchestratorError> {
        let mut s = self.inner.step(actions.clone())?;
        for _ in 1..self.k {
            if s.done {
                break;
            }
            let next = self.inner.step(actions.clone())?;
            let rewards = s.rewards.iter().zip(&next.rewards).map(|(a, b)| a + b).collect();
            s = ViewStep { rewards, ..next };
        }
        Ok(s)
    }
}

impl<L: EnvLink> EntityView for ProxyView<L> {
    fn specs(&self) -> &[EntitySpec] {
        self.inner.specs()
    }

    fn reset(&mut self) -> Result<Vec<Value>, OrchestratorError> {
        self.inner.reset()
    }

    fn step(&mut self, actions: Vec<Value>) -> Result<ViewStep, OrchestratorError> {
        self.inner.step(actions)
    }
}

/// Fuses a group into one agent: concatenated observation, one
/// concatenated box action, summed reward. Infos merge with the first
/// entity winning on key clashes.
pub struct CombinedEntityView<V: EntityView> {
    inner: V,
}

impl<V: EntityView> CombinedEntityView<V> {
    pub fn new(inner: V) -> Self {
        CombinedEntityView { inner }
    }

    pub fn obs_dim(&self) -> usize {
        self.inner.specs().iter().map(|s| s.obs_space.flat_dim()).sum()
    }

    pub fn action_dim(&self) -> usize {
        self.inner.specs().iter().map(|s| s.act_space.flat_dim()).sum()
    }

    pub fn reset(&mut self) -> Result<Value, OrchestratorError> {
        let obs = self.inner.reset()?;
        Ok(combine_observations(&obs, self.inner.specs()))
    }

    pub fn step(&mut self, action: &[f64]) -> Result<ProxyStep, OrchestratorError> {
        if action.len() != self.action_dim() {
            return Err(OrchestratorError::LengthMismatch { expected: self.action_dim(), got: action.len() });
        }
        let acts = split_action(action, self.inner.specs());
        let s = self.inner.step(acts)?;
        let mut info = Info::new();
        for i in s.infos.iter().rev() {
            info.extend(i.iter().map(|(k, v)| (k.clone(), v.clone())));
        }
        Ok(ProxyStep { obs: combine_observations(&s.obs, self.inner.specs()), reward: combine_rewards(&s.rewards), done: s.done, info })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{CoopNavConfig, EchoConfig};

    fn echo(n: usize, horizon: u32) -> EnvConfig {
        EnvConfig::Echo(EchoConfig { n_entities: n, horizon, ..Default::default() })
    }

    #[test]
    fn proxy_echo_step() {
        let mut p = ProxyView::new(DirectLink::new(&echo(3, 10), &[1], 7, 0).unwrap()).unwrap();
        let o = p.reset().unwrap();
        let s = p.step(Value::Discrete(5)).unwrap();
        assert_eq!(s.reward, 5.0);
        assert!(!s.done);
        let (Value::Real(a), Value::Real(b)) = (&o, &s.obs) else { panic!("echo observes reals") };
        assert_eq!(b[0], a[0] + 1.0);
        assert_eq!(b[1], 1.0);
    }

    #[test]
    fn step_before_reset_is_rejected() {
        let mut p = ProxyView::new(DirectLink::new(&echo(1, 3), &[0], 7, 0).unwrap()).unwrap();
        assert!(matches!(p.step(Value::Discrete(1)), Err(OrchestratorError::ProtocolViolation(_))));
        p.reset().unwrap();
        for _ in 0..2 {
            assert!(!p.step(Value::Discrete(1)).unwrap().done);
        }
        let last = p.step(Value::Discrete(1)).unwrap();
        assert!(last.done);
        assert!(!last.info.contains_key(INFO_TERMINAL_OBS));
        assert!(matches!(p.step(Value::Discrete(1)), Err(OrchestratorError::ProtocolViolation(_))));
        p.reset().unwrap();
        p.step(Value::Discrete(1)).unwrap();
    }

    #[test]
    fn group_order_and_width() {
        let mut g = GroupView::new(DirectLink::new(&echo(3, 10), &[2, 0], 7, 0).unwrap());
        g.reset().unwrap();
        let s = g.step(vec![Value::Discrete(4), Value::Discrete(9)]).unwrap();
        assert_eq!(s.rewards, vec![4.0, 9.0]);
        assert!(matches!(g.step(vec![Value::Discrete(1)]), Err(OrchestratorError::LengthMismatch { expected: 2, got: 1 })));
    }

    #[test]
    fn frame_skip_sums_repeated_rewards() {
        let mut f = FrameSkip::new(GroupView::new(DirectLink::new(&echo(1, 10), &[0], 7, 0).unwrap()), 3).unwrap();
        f.reset().unwrap();
        let s = f.step(vec![Value::Discrete(2)]).unwrap();
        assert_eq!(s.rewards, vec![6.0]);
        // horizon 10: decisions at 3, 6, 9, then the episode ends after one more exchange
        for _ in 0..2 {
            f.step(vec![Value::Discrete(2)]).unwrap();
        }
        let last = f.step(vec![Value::Discrete(2)]).unwrap();
        assert!(last.done);
        assert_eq!(last.rewards, vec![2.0]);
        assert!(FrameSkip::new(GroupView::new(DirectLink::new(&echo(1, 10), &[0], 7, 0).unwrap()), 0).is_err());
    }

    #[test]
    fn combined_view_fuses_coop_nav() {
        let env = EnvConfig::CoopNav(CoopNavConfig::default());
        let mut c = CombinedEntityView::new(GroupView::new(DirectLink::new(&env, &[0, 1, 2], 7, 0).unwrap()));
        assert_eq!((c.obs_dim(), c.action_dim()), (42, 6));
        let Value::Real(o) = c.reset().unwrap() else { panic!("real obs") };
        assert_eq!(o.len(), 42);
        let s = c.step(&[0.0; 6]).unwrap();
        assert!(matches!(s.obs, Value::Real(ref v) if v.len() == 42));
    }
}
