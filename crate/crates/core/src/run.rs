//! Drivers behind the `train` and `eval` commands.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig, SchemeConfig, TransportMode};
use crate::envs::EnvError;
use crate::interface::Value;
use crate::learners::checkpoint::Checkpoint;
use crate::learners::{build_agent, LearnerError, PolicyKind};
use crate::orchestrator::{MultiprocessOptions, NoHook, Orchestrator, OrchestratorError, RoundReport, Transport};
use crate::orchestrator::multiprocess::{LOG_DIR_VAR, TRANSPORT_VAR};
use crate::schemes::{CurriculumHook, EvolutionHook, PopulationState};
use crate::seed;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("io: {0}")]
    Io(String),
    #[error("{0} already holds checkpoints; pass --resume to continue from them or pick a new output directory")]
    ExistingCheckpoints(PathBuf),
}

/// Files a training run writes under its output directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
    pub metrics: PathBuf,
    pub checkpoints: PathBuf,
    pub lineage: PathBuf,
    pub logs: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> Self {
        RunPaths {
            root: root.to_path_buf(),
            metrics: root.join("metrics.csv"),
            checkpoints: root.join("checkpoints"),
            lineage: root.join("lineage.csv"),
            logs: root.join("logs"),
        }
    }
}

/// Picks the transport: `force_deterministic`, else `ARENA_TRANSPORT`, else the config.
pub fn resolve_transport(cfg: &RunConfig, force_deterministic: bool, node_bin: &Path, log_dir: &Path) -> Result<Transport, ConfigError> {
    let mode = if force_deterministic {
        TransportMode::Deterministic
    } else {
        match std::env::var(TRANSPORT_VAR) {
            Ok(v) => TransportMode::parse(&v).ok_or_else(|| ConfigError::ValidationError {
                field: TRANSPORT_VAR.into(),
                reason: format!("unknown transport {v:?}"),
            })?,
            Err(_) => cfg.transport,
        }
    };
    Ok(match mode {
        TransportMode::Deterministic => Transport::Deterministic,
        TransportMode::Multiprocess => Transport::Multiprocess(MultiprocessOptions {
            node_bin: node_bin.to_path_buf(),
            log_dir: std::env::var_os(LOG_DIR_VAR).map(PathBuf::from).unwrap_or_else(|| log_dir.to_path_buf()),
            timeout: Duration::from_secs_f64(cfg.timeout_secs),
        }),
    })
}

/// Runs every round of a validated config under `out`, starting from fresh
/// parameters. Fails if `out` already holds checkpoints.
pub fn train(cfg: &RunConfig, out: &Path, transport: Transport) -> Result<Vec<RoundReport>, RunError> {
    let ckpts = RunPaths::new(out).checkpoints;
    let existing = std::fs::read_dir(&ckpts)
        .map(|d| d.filter_map(Result::ok).any(|e| e.path().extension().is_some_and(|x| x == "ckpt")))
        .unwrap_or(false);
    if existing {
        return Err(RunError::ExistingCheckpoints(ckpts));
    }
    resume(cfg, out, transport)
}

/// Like [`train`], but trainable policies start from any checkpoints
/// already under `out`.
pub fn resume(cfg: &RunConfig, out: &Path, transport: Transport) -> Result<Vec<RoundReport>, RunError> {
    let paths = RunPaths::new(out);
    cfg.write_effective(out)?;
    let mut orch = Orchestrator::new(cfg.plan()?, cfg.seed, transport, &paths.checkpoints)?
        .with_log_every(cfg.log_every)
        .with_metrics(&paths.metrics)?;
    let schedule = cfg.schedule()?;
    let reports = match &cfg.scheme {
        SchemeConfig::None => orch.run_rounds(&schedule, &mut NoHook)?,
        SchemeConfig::Curriculum { .. } => {
            let schedule_values = cfg.curriculum().expect("curriculum scheme");
            orch.run_rounds(&schedule, &mut CurriculumHook { schedule: schedule_values })?
        }
        SchemeConfig::Evolution { members, .. } => {
            let mut hook = EvolutionHook { population: PopulationState::new(members.clone()), lineage_path: paths.lineage.clone() };
            orch.run_rounds(&schedule, &mut hook)?
        }
    };
    Ok(reports)
}

/// One position sample of an evaluation rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub episode: u64,
    pub t: u32,
    pub entity: usize,
    pub pos_x: f64,
    pub pos_y: f64,
    pub reward: f64,
}

/// Rolls out the first env of the plan for `episodes` episodes with every
/// trainable policy frozen at its checkpoint in `checkpoint_dir`. Each step
/// yields one row per entity with the first two observation components.
pub fn evaluate(cfg: &RunConfig, checkpoint_dir: &Path, episodes: u64) -> Result<Vec<TraceRow>, RunError> {
    let plan = cfg.plan()?;
    let env_node = &plan.env_nodes[0];
    let specs = env_node.env.entity_specs();
    let mut agents = vec![];
    for w in plan.env_groups[&env_node.id].iter().map(|w| &plan.worker_nodes[*w]) {
        let kind = match &plan.policies[&w.policy] {
            PolicyKind::Trainable { .. } => {
                PolicyKind::Frozen { checkpoint: checkpoint_dir.join(format!("{}.ckpt", w.policy)).display().to_string() }
            }
            other => other.clone(),
        };
        let restore = match &kind {
            PolicyKind::Frozen { checkpoint } => Some(Checkpoint::load(Path::new(checkpoint)).map_err(LearnerError::from)?),
            _ => None,
        };
        let ids = w.assignment.entities();
        let wspecs: Vec<_> = ids.iter().map(|&e| specs[e].clone()).collect();
        let agent = build_agent(&w.policy, &kind, &wspecs, w.assignment.is_group(), 0, restore.as_ref())?;
        agents.push((ids, agent, seed::rng(&[cfg.seed, seed::STREAM_WORKER, u64::MAX, w.id as u64])));
    }
    let mut env = env_node.env.build()?;
    let mut rows = vec![];
    for ep in 0..episodes {
        let mut obs = env.reset(seed::episode_seed(cfg.seed, u64::MAX, 0, ep))?;
        let mut t = 0;
        loop {
            let mut joint = vec![Value::Null; specs.len()];
            for (ids, agent, rng) in agents.iter_mut() {
                let mine: Vec<Value> = ids.iter().map(|&e| obs[e].clone()).collect();
                for (&e, a) in ids.iter().zip(agent.act(&mine, rng)) {
                    joint[e] = a;
                }
            }
            let b = env.step(&joint)?;
            t += 1;
            for (e, (o, r)) in b.observations.iter().zip(&b.rewards).enumerate() {
                let f = o.to_features(specs[e].obs_space.flat_dim());
                rows.push(TraceRow { episode: ep, t, entity: e, pos_x: f.first().copied().unwrap_or(0.0), pos_y: f.get(1).copied().unwrap_or(0.0), reward: *r });
            }
            if b.done {
                break;
            }
            obs = b.observations;
        }
    }
    Ok(rows)
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<(), RunError> {
    let io = |e: csv::Error| RunError::Io(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| RunError::Io(e.to_string()))
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>, RunError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| RunError::Io(e.to_string()))?;
    r.deserialize().map(|row| row.map_err(|e| RunError::Io(e.to_string()))).collect()
}
