//! Node descriptors and the messages nodes exchange.
//!
//! Descriptors travel as JSON in both transports; runtime messages are
//! bincode frames with a u32 little-endian length prefix.

use std::fmt;
use std::io::{Read, Write};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::envs::EnvConfig;
use crate::interface::{EntitySpec, Value};
use crate::learners::collective::GradVector;
use crate::learners::PolicyKind;
use crate::metrics::MetricsRow;
use crate::routing::ProcessPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeId {
    Env(usize),
    Worker(usize),
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Env(i) => write!(f, "env-{i}"),
            NodeId::Worker(i) => write!(f, "worker-{i}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    EnvGroup,
    PolicyGroup,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommGroup {
    pub id: String,
    pub kind: GroupKind,
    pub members: Vec<NodeId>,
}

/// Env groups (one env plus its workers) followed by policy groups.
pub fn comm_groups(plan: &ProcessPlan) -> Vec<CommGroup> {
    let mut out: Vec<CommGroup> = plan
        .env_groups
        .iter()
        .map(|(env, workers)| CommGroup {
            id: format!("env/{env}"),
            kind: GroupKind::EnvGroup,
            members: std::iter::once(NodeId::Env(*env)).chain(workers.iter().map(|w| NodeId::Worker(*w))).collect(),
        })
        .collect();
    out.extend(plan.policy_groups.iter().map(|(policy, workers)| CommGroup {
        id: format!("policy/{policy}"),
        kind: GroupKind::PolicyGroup,
        members: workers.iter().map(|w| NodeId::Worker(*w)).collect(),
    }));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvDescriptor {
    pub env_id: usize,
    pub env: EnvConfig,
    /// Worker id and its entity ids, in the env group's order.
    pub members: Vec<(usize, Vec<usize>)>,
    /// Steps this env must run before stopping at the next episode boundary.
    pub share: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerDescriptor {
    pub worker_id: usize,
    pub env_id: usize,
    pub policy: String,
    pub kind: PolicyKind,
    pub entities: Vec<usize>,
    pub grouped: bool,
    pub specs: Vec<EntitySpec>,
    pub init_seed: u64,
    pub rng_seed: u64,
    pub restore: Option<PathBuf>,
    pub log_every: u64,
    pub curriculum: Option<f64>,
    /// Env steps this worker took in earlier rounds.
    pub env_steps_before: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Env(EnvDescriptor),
    Worker(WorkerDescriptor),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDescriptor {
    pub node: NodeId,
    pub run_seed: u64,
    pub round: u64,
    pub groups: Vec<String>,
    pub timeout_secs: Option<f64>,
    pub role: Role,
}

impl NodeDescriptor {
    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("descriptor serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }
}

/// Reply of an env to one worker for one exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplyMsg {
    pub worker: usize,
    /// `StepBatch` frame of the worker's entities.
    pub frame: Vec<u8>,
    /// The env stops after this exchange; the worker must not act again.
    pub stop: bool,
    pub tick: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub tick: u64,
    pub env_id: usize,
    pub worker: usize,
    pub policy: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerReport {
    pub worker: usize,
    pub policy: String,
    /// Rows tagged with the tick they were produced at.
    pub rows: Vec<(u64, MetricsRow)>,
    pub episodes: Vec<EpisodeRecord>,
    pub checkpoint: Option<Vec<u8>>,
    pub version: u64,
    pub env_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvReport {
    pub env_id: usize,
    pub steps: u64,
    pub episodes: u64,
}

/// Node to hub.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ToHub {
    Hello { node: NodeId, pid: u32 },
    Actions { env: usize, worker: usize, actions: Vec<Value> },
    Reply(ReplyMsg),
    Grad { seq: u64, grad: GradVector },
    Leave { policy: String, count: u64 },
    Worker(WorkerReport),
    Env(EnvReport),
    Failed(String),
}

/// Hub to node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FromHub {
    Start,
    Actions { worker: usize, actions: Vec<Value> },
    Reply(ReplyMsg),
    Mean { seq: u64, values: Vec<f64> },
}

pub fn write_msg<W: Write, T: Serialize>(out: &mut W, msg: &T) -> std::io::Result<()> {
    let body = bincode::serialize(msg).map_err(std::io::Error::other)?;
    let len = u32::try_from(body.len()).map_err(std::io::Error::other)?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(&body)?;
    out.flush()
}

pub fn read_msg<R: Read, T: for<'de> Deserialize<'de>>(input: &mut R) -> std::io::Result<T> {
    let mut len = [0u8; 4];
    input.read_exact(&mut len)?;
    let mut body = vec![0u8; u32::from_le_bytes(len) as usize];
    input.read_exact(&mut body)?;
    bincode::deserialize(&body).map_err(std::io::Error::other)
}

/// Group names a node belongs to, for its descriptor.
pub(crate) fn groups_of(node: NodeId, groups: &[CommGroup]) -> Vec<String> {
    groups.iter().filter(|g| g.members.contains(&node)).map(|g| g.id.clone()).collect()
}
