//! Round lifecycle: launches env and worker nodes for a process plan, runs
//! the lock-step exchange until every env has used its share of the step
//! budget, then collects metrics and checkpoints and brings the nodes down.
//!
//! Two transports run the same node logic: a single-thread deterministic
//! scheduler and one OS process per node routed through a local hub.

pub mod deterministic;
pub mod multiprocess;
pub mod server;
pub mod view;
pub mod wire;
pub mod worker;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use crate::envs::EnvError;
use crate::interface::{BatchError, FrameError};
use crate::learners::checkpoint::Checkpoint;
use crate::learners::collective::CollectiveError;
use crate::learners::{LearnerError, PolicyKind};
use crate::metrics::{MetricsError, MetricsRow, MetricsWriter, RowKind};
use crate::routing::ProcessPlan;
use crate::seed;

pub use multiprocess::MultiprocessOptions;
use wire::{comm_groups, groups_of, EnvDescriptor, EnvReport, EpisodeRecord, NodeDescriptor, NodeId, Role, WorkerDescriptor, WorkerReport};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OrchestratorError {
    #[error("no action message from worker {0}")]
    MissingWorkerMessage(usize),
    #[error("malformed action for entity {0}")]
    MalformedAction(usize),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("expected {expected} entries, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("node {node} crashed: {diagnostic}")]
    NodeCrash { node: String, diagnostic: String },
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("invalid round: {0}")]
    InvalidRound(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Collective(#[from] CollectiveError),
    #[error("io: {0}")]
    Io(String),
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("scheme: {0}")]
    Scheme(String),
}

impl From<MetricsError> for OrchestratorError {
    fn from(e: MetricsError) -> Self {
        OrchestratorError::Metrics(e.to_string())
    }
}

#[derive(Debug, Clone)]
pub enum Transport {
    Deterministic,
    Multiprocess(MultiprocessOptions),
}

/// What happened to the node processes when a round ended.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Teardown {
    /// Nodes still registered after teardown.
    pub registry_len: usize,
    /// Node pids still alive after teardown.
    pub orphans: Vec<u32>,
}

/// Raw per-node results of one round.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub workers: Vec<WorkerReport>,
    pub envs: Vec<EnvReport>,
    pub teardown: Teardown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundConfig {
    pub round_index: u64,
    /// Env steps summed over all envs; each env runs `ceil(budget / envs)`
    /// steps rounded up to the end of its episode.
    pub step_budget: u64,
    /// Env parameters set for this round, e.g. a curriculum value.
    pub env_params: BTreeMap<String, f64>,
    /// Value written to the `curriculum` metrics column.
    pub curriculum: Option<f64>,
}

impl RoundConfig {
    pub fn new(round_index: u64, step_budget: u64) -> Self {
        RoundConfig { round_index, step_budget, env_params: BTreeMap::new(), curriculum: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyStats {
    pub episodes: usize,
    pub mean_score: Option<f64>,
    /// Episode scores in completion order (tick, then worker id).
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round_index: u64,
    pub step_budget: u64,
    pub steps: u64,
    pub env_episodes: u64,
    pub wall_time: f64,
    pub policies: BTreeMap<String, PolicyStats>,
    pub episodes: Vec<EpisodeRecord>,
    /// Checkpoint files written for trainable policies.
    pub checkpoints: BTreeMap<String, PathBuf>,
    /// Final version of each trainable policy.
    pub versions: BTreeMap<String, u64>,
    pub env_params: BTreeMap<String, f64>,
    pub teardown: Teardown,
}

/// Scheme hooks around each round of `run_rounds`.
pub trait RoundHook {
    fn before_round(&mut self, _orch: &mut Orchestrator, _cfg: &mut RoundConfig) -> Result<(), OrchestratorError> {
        Ok(())
    }

    fn after_round(&mut self, _orch: &mut Orchestrator, _report: &RoundReport) -> Result<(), OrchestratorError> {
        Ok(())
    }
}

pub struct NoHook;

impl RoundHook for NoHook {}

/// Runs rounds of one plan and carries state between them: checkpoints,
/// cumulative env steps per worker and the metrics file.
pub struct Orchestrator {
    plan: ProcessPlan,
    run_seed: u64,
    transport: Transport,
    checkpoint_dir: PathBuf,
    log_every: u64,
    timeout_secs: Option<f64>,
    env_steps: BTreeMap<usize, u64>,
    metrics: Option<MetricsWriter>,
}

impl Orchestrator {
    pub fn new(plan: ProcessPlan, run_seed: u64, transport: Transport, checkpoint_dir: &Path) -> Result<Self, OrchestratorError> {
        std::fs::create_dir_all(checkpoint_dir).map_err(|e| OrchestratorError::Io(e.to_string()))?;
        let timeout_secs = match &transport {
            Transport::Deterministic => None,
            Transport::Multiprocess(o) => Some(o.timeout.as_secs_f64()),
        };
        Ok(Orchestrator {
            plan,
            run_seed,
            transport,
            checkpoint_dir: checkpoint_dir.to_path_buf(),
            log_every: 100,
            timeout_secs,
            env_steps: BTreeMap::new(),
            metrics: None,
        })
    }

    /// Emit an update row every `n` updates of a policy (0 disables them).
    pub fn with_log_every(mut self, n: u64) -> Self {
        self.log_every = n;
        self
    }

    /// Append metrics rows of every round to `path`.
    pub fn with_metrics(mut self, path: &Path) -> Result<Self, OrchestratorError> {
        self.metrics = Some(MetricsWriter::create(path)?);
        Ok(self)
    }

    pub fn plan(&self) -> &ProcessPlan {
        &self.plan
    }

    pub fn checkpoint_path(&self, policy: &str) -> PathBuf {
        self.checkpoint_dir.join(format!("{policy}.ckpt"))
    }

    /// Launch descriptors of every node for one round.
    pub fn descriptors(&self, cfg: &RoundConfig) -> Result<Vec<NodeDescriptor>, OrchestratorError> {
        if cfg.step_budget == 0 {
            return Err(OrchestratorError::InvalidRound("step budget must be >= 1".into()));
        }
        let groups = comm_groups(&self.plan);
        let n_envs = self.plan.env_nodes.len() as u64;
        let share = cfg.step_budget.div_ceil(n_envs);
        let mut out = vec![];
        for key in cfg.env_params.keys() {
            if !self.plan.env_nodes.iter().any(|e| e.env.param(key).is_some()) {
                return Err(OrchestratorError::Env(EnvError::UnknownParam(key.clone())));
            }
        }
        for e in &self.plan.env_nodes {
            let mut env = e.env.clone();
            for (key, value) in &cfg.env_params {
                if env.param(key).is_some() {
                    env.set_param(key, *value)?;
                }
            }
            let members = self.plan.env_groups[&e.id]
                .iter()
                .map(|w| (*w, self.plan.worker_nodes[*w].assignment.entities()))
                .collect();
            let node = NodeId::Env(e.id);
            out.push(NodeDescriptor {
                node,
                run_seed: self.run_seed,
                round: cfg.round_index,
                groups: groups_of(node, &groups),
                timeout_secs: self.timeout_secs,
                role: Role::Env(EnvDescriptor { env_id: e.id, env, members, share }),
            });
        }
        for w in &self.plan.worker_nodes {
            let kind = self.plan.policies[&w.policy].clone();
            let entities = w.assignment.entities();
            let all = self.plan.env_nodes[w.env_id].env.entity_specs();
            let restore = match kind {
                PolicyKind::Trainable { .. } => Some(self.checkpoint_path(&w.policy)).filter(|p| p.exists()),
                _ => None,
            };
            let node = NodeId::Worker(w.id);
            out.push(NodeDescriptor {
                node,
                run_seed: self.run_seed,
                round: cfg.round_index,
                groups: groups_of(node, &groups),
                timeout_secs: self.timeout_secs,
                role: Role::Worker(WorkerDescriptor {
                    worker_id: w.id,
                    env_id: w.env_id,
                    policy: w.policy.clone(),
                    kind,
                    specs: entities.iter().map(|&e| all[e].clone()).collect(),
                    entities,
                    grouped: w.assignment.is_group(),
                    init_seed: seed::mix(&[self.run_seed, seed::STREAM_POLICY_INIT, seed::name_hash(&w.policy)]),
                    rng_seed: seed::mix(&[self.run_seed, seed::STREAM_WORKER, cfg.round_index, w.id as u64]),
                    restore,
                    log_every: self.log_every,
                    curriculum: cfg.curriculum,
                    env_steps_before: self.env_steps.get(&w.id).copied().unwrap_or(0),
                }),
            });
        }
        Ok(out)
    }

    pub fn run_round(&mut self, cfg: &RoundConfig) -> Result<RoundReport, OrchestratorError> {
        let descriptors = self.descriptors(cfg)?;
        let t0 = Instant::now();
        let outcome = match &self.transport {
            Transport::Deterministic => deterministic::run(&descriptors)?,
            Transport::Multiprocess(opts) => multiprocess::run(&descriptors, opts)?,
        };
        let wall_time = t0.elapsed().as_secs_f64();
        if outcome.workers.len() != self.plan.worker_nodes.len() || outcome.envs.len() != self.plan.env_nodes.len() {
            return Err(OrchestratorError::ProtocolViolation("missing node reports".into()));
        }
        let steps: u64 = outcome.envs.iter().map(|e| e.steps).sum();
        let env_episodes = outcome.envs.iter().map(|e| e.episodes).sum();

        let mut tagged: Vec<(u64, RowKind, usize, usize, &MetricsRow)> = vec![];
        for w in &outcome.workers {
            self.env_steps.insert(w.worker, w.env_steps);
            for (i, (tick, row)) in w.rows.iter().enumerate() {
                tagged.push((*tick, row.kind, w.worker, i, row));
            }
        }
        tagged.sort_by_key(|t| (t.0, t.1, t.2, t.3));
        let rows: Vec<MetricsRow> = tagged.into_iter().map(|t| t.4.clone()).collect();
        if let Some(m) = &mut self.metrics {
            m.write(&rows)?;
        }

        let mut episodes: Vec<EpisodeRecord> = outcome.workers.iter().flat_map(|w| w.episodes.iter().cloned()).collect();
        episodes.sort_by_key(|e| (e.tick, e.worker));
        let mut policies = BTreeMap::new();
        for name in self.plan.policies.keys() {
            let scores: Vec<f64> = episodes.iter().filter(|e| &e.policy == name).map(|e| e.score).collect();
            let mean_score = (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64);
            policies.insert(name.clone(), PolicyStats { episodes: scores.len(), mean_score, scores });
        }

        let mut checkpoints = BTreeMap::new();
        let mut versions = BTreeMap::new();
        for (name, kind) in &self.plan.policies {
            if !kind.is_trainable() {
                continue;
            }
            // most updates wins; lowest worker id breaks ties
            let best = outcome
                .workers
                .iter()
                .filter(|w| &w.policy == name && w.checkpoint.is_some())
                .min_by_key(|w| (std::cmp::Reverse(w.version), w.worker));
            if let Some(w) = best {
                let bytes = w.checkpoint.as_ref().expect("filtered on checkpoint");
                Checkpoint::from_bytes(bytes).map_err(LearnerError::from)?;
                let path = self.checkpoint_path(name);
                std::fs::write(&path, bytes).map_err(|e| OrchestratorError::Io(e.to_string()))?;
                checkpoints.insert(name.clone(), path);
                versions.insert(name.clone(), w.version);
            }
        }
        Ok(RoundReport {
            round_index: cfg.round_index,
            step_budget: cfg.step_budget,
            steps,
            env_episodes,
            wall_time,
            policies,
            episodes,
            checkpoints,
            versions,
            env_params: cfg.env_params.clone(),
            teardown: outcome.teardown,
        })
    }

    /// Runs the schedule in order with the hook around every round.
    pub fn run_rounds(&mut self, schedule: &[RoundConfig], hook: &mut dyn RoundHook) -> Result<Vec<RoundReport>, OrchestratorError> {
        if schedule.is_empty() {
            return Err(OrchestratorError::InvalidRound("empty schedule".into()));
        }
        let mut reports = vec![];
        for cfg in schedule {
            let mut cfg = cfg.clone();
            hook.before_round(self, &mut cfg)?;
            let report = self.run_round(&cfg)?;
            hook.after_round(self, &report)?;
            reports.push(report);
        }
        Ok(reports)
    }
}
