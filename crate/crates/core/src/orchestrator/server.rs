//! The env side of the lock-step exchange.

use std::collections::BTreeMap;

use crate::envs::{EnvConfig, Environment};
use crate::interface::{validate_batch, EntitySpec, StepBatch, Value, INFO_TERMINAL_OBS};
use crate::seed;

use super::OrchestratorError;

/// One worker's slice of an exchange.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerReply {
    pub worker: usize,
    pub batch: StepBatch,
    pub stop: bool,
    pub tick: u64,
}

/// Steps one environment for the workers of its env group.
///
/// Each exchange takes exactly one action message per member, assembles the
/// actions in entity-id order, steps once and slices the result back by
/// assignment. A finished episode auto-resets unless the env has used up its
/// share of the round budget; the reset observations replace the terminal
/// ones and the latter move to the `terminal_obs` info.
pub struct EnvServer {
    env_id: usize,
    env: Box<dyn Environment>,
    specs: Vec<EntitySpec>,
    members: Vec<(usize, Vec<usize>)>,
    run_seed: u64,
    round: u64,
    share: u64,
    steps: u64,
    episodes: u64,
    tick: u64,
    started: bool,
    stopped: bool,
}

impl EnvServer {
    pub fn new(
        env_id: usize,
        config: &EnvConfig,
        members: Vec<(usize, Vec<usize>)>,
        run_seed: u64,
        round: u64,
        share: u64,
    ) -> Result<Self, OrchestratorError> {
        let env = config.build()?;
        let specs = env.entity_specs().to_vec();
        let mut seen = vec![false; specs.len()];
        for (_, ids) in &members {
            for &e in ids {
                if e >= specs.len() || std::mem::replace(&mut seen[e], true) {
                    return Err(OrchestratorError::ProtocolViolation(format!("env {env_id}: bad assignment of entity {e}")));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(OrchestratorError::ProtocolViolation(format!("env {env_id}: entities without a worker")));
        }
        Ok(EnvServer {
            env_id,
            env,
            specs,
            members,
            run_seed,
            round,
            share,
            steps: 0,
            episodes: 0,
            tick: 0,
            started: false,
            stopped: false,
        })
    }

    pub fn env_id(&self) -> usize {
        self.env_id
    }

    pub fn members(&self) -> &[(usize, Vec<usize>)] {
        &self.members
    }

    pub fn specs(&self) -> &[EntitySpec] {
        &self.specs
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Completed episodes.
    pub fn episodes(&self) -> u64 {
        self.episodes
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped
    }

    fn reset(&mut self) -> Result<Vec<Value>, OrchestratorError> {
        let s = seed::episode_seed(self.run_seed, self.round, self.env_id, self.episodes);
        Ok(self.env.reset(s)?)
    }

    /// Resets the env and hands every member its initial observations.
    pub fn start(&mut self) -> Result<Vec<WorkerReply>, OrchestratorError> {
        if self.started {
            return Err(OrchestratorError::ProtocolViolation(format!("env {} started twice", self.env_id)));
        }
        self.started = true;
        let obs = self.reset()?;
        let n = obs.len();
        let batch = StepBatch { observations: obs, rewards: vec![0.0; n], done: false, infos: vec![Default::default(); n] };
        validate_batch(&self.specs, &batch)?;
        Ok(self.slice(&batch, false))
    }

    /// Runs one exchange given every member's actions.
    pub fn serve(&mut self, actions: &BTreeMap<usize, Vec<Value>>) -> Result<Vec<WorkerReply>, OrchestratorError> {
        if !self.started || self.stopped {
            return Err(OrchestratorError::ProtocolViolation(format!("env {} is not serving", self.env_id)));
        }
        let mut joint = vec![Value::Null; self.specs.len()];
        for (worker, ids) in &self.members {
            let acts = actions.get(worker).ok_or(OrchestratorError::MissingWorkerMessage(*worker))?;
            if acts.len() != ids.len() {
                return Err(OrchestratorError::LengthMismatch { expected: ids.len(), got: acts.len() });
            }
            for (&e, a) in ids.iter().zip(acts) {
                if !a.is_null() && !self.specs[e].act_space.contains(a) {
                    return Err(OrchestratorError::MalformedAction(e));
                }
                joint[e] = a.clone();
            }
        }
        if let Some(extra) = actions.keys().find(|w| !self.members.iter().any(|(m, _)| m == *w)) {
            return Err(OrchestratorError::ProtocolViolation(format!("env {}: message from non-member worker {extra}", self.env_id)));
        }
        let mut batch = self.env.step(&joint)?;
        validate_batch(&self.specs, &batch)?;
        self.steps += 1;
        self.tick += 1;
        if batch.done {
            self.episodes += 1;
            self.stopped = self.steps >= self.share;
            if !self.stopped {
                let fresh = self.reset()?;
                for ((info, old), new) in batch.infos.iter_mut().zip(batch.observations.iter_mut()).zip(fresh) {
                    info.insert(INFO_TERMINAL_OBS.into(), std::mem::replace(old, new).to_info_text());
                }
            }
        }
        let stop = self.stopped;
        Ok(self.slice(&batch, stop))
    }

    fn slice(&self, batch: &StepBatch, stop: bool) -> Vec<WorkerReply> {
        self.members
            .iter()
            .map(|(worker, ids)| WorkerReply {
                worker: *worker,
                batch: StepBatch {
                    observations: ids.iter().map(|&e| batch.observations[e].clone()).collect(),
                    rewards: ids.iter().map(|&e| batch.rewards[e]).collect(),
                    done: batch.done,
                    infos: ids.iter().map(|&e| batch.infos[e].clone()).collect(),
                },
                stop,
                tick: self.tick,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EchoConfig;

    fn echo(n: usize, horizon: u32) -> EnvConfig {
        EnvConfig::Echo(EchoConfig { n_entities: n, horizon, ..Default::default() })
    }

    #[test]
    fn slices_by_assignment() {
        let mut s = EnvServer::new(0, &echo(3, 5), vec![(0, vec![0]), (1, vec![1, 2])], 1, 0, 100).unwrap();
        let r = s.start().unwrap();
        assert_eq!(r[0].batch.len(), 1);
        assert_eq!(r[1].batch.len(), 2);
        let acts = BTreeMap::from([(0, vec![Value::Discrete(1)]), (1, vec![Value::Discrete(2), Value::Discrete(3)])]);
        let r = s.serve(&acts).unwrap();
        assert_eq!(r[1].batch.rewards, vec![2.0, 3.0]);
        assert_eq!(r[0].batch.done, r[1].batch.done);
    }

    #[test]
    fn missing_and_malformed_messages() {
        let mut s = EnvServer::new(0, &echo(2, 5), vec![(0, vec![0]), (1, vec![1])], 1, 0, 100).unwrap();
        s.start().unwrap();
        let only = BTreeMap::from([(0, vec![Value::Discrete(1)])]);
        assert_eq!(s.serve(&only).unwrap_err(), OrchestratorError::MissingWorkerMessage(1));
        let bad = BTreeMap::from([(0, vec![Value::Discrete(1)]), (1, vec![Value::Real(vec![1.0])])]);
        assert_eq!(s.serve(&bad).unwrap_err(), OrchestratorError::MalformedAction(1));
    }

    #[test]
    fn budget_ends_at_episode_boundary() {
        // budget 10 with horizon 3 runs 4 full episodes
        let mut s = EnvServer::new(0, &echo(1, 3), vec![(0, vec![0])], 1, 0, 10).unwrap();
        s.start().unwrap();
        let acts = BTreeMap::from([(0, vec![Value::Null])]);
        while !s.is_stopped() {
            s.serve(&acts).unwrap();
        }
        assert_eq!((s.steps(), s.episodes()), (12, 4));
    }
}
