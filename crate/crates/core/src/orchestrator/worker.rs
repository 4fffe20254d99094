//! The worker side: one agent driven by replies from its env.

use crate::interface::{StepBatch, Value, INFO_TERMINAL_OBS, INFO_TRUNCATED};
use crate::learners::checkpoint::Checkpoint;
use crate::learners::collective::GradVector;
use crate::learners::{build_agent, Agent, Experience, PolicyKind, UpdateStats};
use crate::metrics::{MetricsRow, RowKind};
use crate::seed::{self, ArenaRng};

use super::wire::{EpisodeRecord, WorkerDescriptor, WorkerReport};
use super::OrchestratorError;

/// Transport-independent worker state.
///
/// Per exchange the transport calls `receive`, then runs the update protocol
/// (`wants_update`, `begin_update`, per phase `gradient` and `apply`,
/// `end_update`) with group means it obtains elsewhere, then `act` unless the
/// env announced a stop.
pub struct WorkerCore {
    desc: WorkerDescriptor,
    agent: Box<dyn Agent>,
    rng: ArenaRng,
    obs: Vec<Value>,
    actions: Vec<Value>,
    returns: Vec<f64>,
    env_steps: u64,
    tick: u64,
    started: bool,
    stopping: bool,
    seq: u64,
    rows: Vec<(u64, MetricsRow)>,
    episodes: Vec<EpisodeRecord>,
    wall: Box<dyn Fn(u64) -> f64 + Send>,
    round: u64,
}

impl WorkerCore {
    /// `wall` maps the current tick to the `wall_time` column.
    pub fn new(desc: WorkerDescriptor, round: u64, wall: Box<dyn Fn(u64) -> f64 + Send>) -> Result<Self, OrchestratorError> {
        let restore = match (&desc.kind, &desc.restore) {
            (PolicyKind::Frozen { checkpoint }, _) => Some(Checkpoint::load(std::path::Path::new(checkpoint)).map_err(crate::learners::LearnerError::from)?),
            (_, Some(path)) => Some(Checkpoint::load(path).map_err(crate::learners::LearnerError::from)?),
            _ => None,
        };
        let agent = build_agent(&desc.policy, &desc.kind, &desc.specs, desc.grouped, desc.init_seed, restore.as_ref())?;
        let n = desc.entities.len();
        Ok(WorkerCore {
            rng: seed::rng(&[desc.rng_seed]),
            env_steps: desc.env_steps_before,
            desc,
            agent,
            obs: vec![],
            actions: vec![],
            returns: vec![0.0; n],
            tick: 0,
            started: false,
            stopping: false,
            seq: 0,
            rows: vec![],
            episodes: vec![],
            wall,
            round,
        })
    }

    pub fn id(&self) -> usize {
        self.desc.worker_id
    }

    pub fn env_id(&self) -> usize {
        self.desc.env_id
    }

    pub fn policy(&self) -> &str {
        &self.desc.policy
    }

    pub fn is_stopping(&self) -> bool {
        self.stopping
    }

    /// Collective steps this worker has contributed to this round.
    pub fn collectives(&self) -> u64 {
        self.seq
    }

    fn row(&self, kind: RowKind) -> MetricsRow {
        MetricsRow {
            wall_time: (self.wall)(self.tick),
            round: self.round,
            policy: self.desc.policy.clone(),
            worker: self.desc.worker_id,
            kind,
            env_steps: self.env_steps,
            grad_steps: self.agent.version(),
            episode_return: None,
            loss_policy: None,
            loss_value: None,
            entropy: None,
            curriculum: self.desc.curriculum,
        }
    }

    pub fn receive(&mut self, batch: StepBatch, stop: bool, tick: u64) -> Result<(), OrchestratorError> {
        if self.stopping {
            return Err(OrchestratorError::ProtocolViolation(format!("worker {} got a reply after stop", self.id())));
        }
        if batch.len() != self.desc.entities.len() {
            return Err(OrchestratorError::LengthMismatch { expected: self.desc.entities.len(), got: batch.len() });
        }
        self.tick = tick;
        self.stopping = stop;
        if !self.started {
            self.started = true;
            self.obs = batch.observations;
            return Ok(());
        }
        if self.actions.is_empty() {
            return Err(OrchestratorError::ProtocolViolation(format!("worker {} got a reply without acting", self.id())));
        }
        let next_obs: Vec<Value> = if batch.done {
            batch
                .infos
                .iter()
                .zip(&batch.observations)
                .map(|(info, o)| info.get(INFO_TERMINAL_OBS).and_then(|t| Value::from_info_text(t)).unwrap_or_else(|| o.clone()))
                .collect()
        } else {
            batch.observations.clone()
        };
        let truncated = batch.infos.iter().any(|i| i.get(INFO_TRUNCATED).is_some_and(|v| v == "true"));
        self.agent.observe(&Experience {
            obs: &self.obs,
            actions: &self.actions,
            rewards: &batch.rewards,
            next_obs: &next_obs,
            done: batch.done,
            truncated,
        });
        self.env_steps += 1;
        for (r, x) in self.returns.iter_mut().zip(&batch.rewards) {
            *r += x;
        }
        if batch.done {
            let score = self.returns.iter().sum::<f64>() / self.returns.len() as f64;
            let mut row = self.row(RowKind::Episode);
            row.episode_return = Some(score);
            self.rows.push((tick, row));
            self.episodes.push(EpisodeRecord {
                tick,
                env_id: self.desc.env_id,
                worker: self.desc.worker_id,
                policy: self.desc.policy.clone(),
                score,
            });
            self.returns.iter_mut().for_each(|r| *r = 0.0);
        }
        self.obs = batch.observations;
        self.actions.clear();
        Ok(())
    }

    pub fn wants_update(&self) -> bool {
        self.agent.wants_update()
    }

    pub fn begin_update(&mut self) -> usize {
        self.agent.begin_update(&mut self.rng)
    }

    /// This worker's contribution to the next collective step.
    pub fn gradient(&mut self, phase: usize) -> (u64, GradVector) {
        self.seq += 1;
        let values = self.agent.phase_gradient(phase);
        (self.seq, GradVector { policy: self.desc.policy.clone(), version: self.agent.version(), values })
    }

    pub fn apply(&mut self, phase: usize, mean: &[f64]) {
        self.agent.apply_phase(phase, mean);
    }

    pub fn end_update(&mut self) -> UpdateStats {
        let stats = self.agent.end_update();
        let v = self.agent.version();
        if self.desc.log_every > 0 && v.is_multiple_of(self.desc.log_every) {
            let mut row = self.row(RowKind::Update);
            row.loss_policy = Some(stats.loss_policy);
            row.loss_value = Some(stats.loss_value);
            row.entropy = Some(stats.entropy);
            self.rows.push((self.tick, row));
        }
        stats
    }

    pub fn act(&mut self) -> Result<Vec<Value>, OrchestratorError> {
        if self.stopping || !self.started || !self.actions.is_empty() {
            return Err(OrchestratorError::ProtocolViolation(format!("worker {} acted out of turn", self.id())));
        }
        self.actions = self.agent.act(&self.obs, &mut self.rng);
        Ok(self.actions.clone())
    }

    pub fn into_report(self) -> WorkerReport {
        WorkerReport {
            worker: self.desc.worker_id,
            policy: self.desc.policy.clone(),
            rows: self.rows,
            episodes: self.episodes,
            checkpoint: self.agent.checkpoint().map(|c| c.to_bytes()),
            version: self.agent.version(),
            env_steps: self.env_steps,
        }
    }
}
