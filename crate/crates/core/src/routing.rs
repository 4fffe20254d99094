//! Compiles a declarative `MatchSpec` into a process plan: which
//! environment instances exist, which worker commands which entities, and
//! the env/policy communication groups that follow from that.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::EnvConfig;
use crate::learners::PolicyKind;

/// Entities one worker commands within one environment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityAssignment {
    Single(usize),
    Group(Vec<usize>),
}

impl EntityAssignment {
    /// Entity ids in declared order.
    pub fn entities(&self) -> Vec<usize> {
        match self {
            EntityAssignment::Single(e) => vec![*e],
            EntityAssignment::Group(ids) => ids.clone(),
        }
    }

    pub fn is_group(&self) -> bool {
        matches!(self, EntityAssignment::Group(_))
    }
}

/// One policy's slot in a match entry, e.g. `{"policy": "p", "group": [0, 1, 2]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotAssignment {
    pub policy: String,
    #[serde(flatten)]
    pub assignment: EntityAssignment,
}

impl SlotAssignment {
    pub fn single(policy: &str, entity: usize) -> Self {
        SlotAssignment { policy: policy.into(), assignment: EntityAssignment::Single(entity) }
    }

    pub fn group(policy: &str, entities: &[usize]) -> Self {
        SlotAssignment { policy: policy.into(), assignment: EntityAssignment::Group(entities.to_vec()) }
    }
}

/// One environment instance and how its entities are split among policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchEntry {
    pub env: EnvConfig,
    pub assignments: Vec<SlotAssignment>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchSpec {
    pub policies: BTreeMap<String, PolicyKind>,
    pub matches: Vec<MatchEntry>,
    pub replication: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvNode {
    pub id: usize,
    pub env: EnvConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerNode {
    pub id: usize,
    pub policy: String,
    pub env_id: usize,
    pub assignment: EntityAssignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessPlan {
    pub policies: BTreeMap<String, PolicyKind>,
    pub env_nodes: Vec<EnvNode>,
    pub worker_nodes: Vec<WorkerNode>,
    /// Env id to the ids of the workers commanding its entities.
    pub env_groups: BTreeMap<usize, Vec<usize>>,
    /// Policy name to the ids of the workers running it.
    pub policy_groups: BTreeMap<String, Vec<usize>>,
}

impl ProcessPlan {
    pub fn node_count(&self) -> usize {
        self.env_nodes.len() + self.worker_nodes.len()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RoutingError {
    #[error("unknown policy {0:?}")]
    UnknownPolicy(String),
    #[error("env entry {env}: entities {missing:?} have no assignment")]
    IncompleteCoverage { env: usize, missing: Vec<usize> },
    #[error("env entry {env}: entity {entity} assigned more than once")]
    DuplicateEntity { env: usize, entity: usize },
    #[error("env entry {env}: entity {entity} does not exist")]
    EntityOutOfRange { env: usize, entity: usize },
    #[error("env entry {env}: empty group")]
    EmptyGroup { env: usize },
    #[error("env entry {env}: {reason}")]
    InvalidEnv { env: usize, reason: String },
    #[error("no policies declared")]
    NoPolicies,
    #[error("no match entries")]
    NoMatches,
    #[error("round-robin needs at least 2 policies, got {0}")]
    TooFewPolicies(usize),
    #[error("replication must be >= 1")]
    InvalidReplication,
}

fn check_entry(index: usize, entry: &MatchEntry, policies: &BTreeMap<String, PolicyKind>) -> Result<(), RoutingError> {
    entry.env.validate().map_err(|e| RoutingError::InvalidEnv { env: index, reason: e.to_string() })?;
    let e_count = entry.env.entity_count();
    let mut seen = BTreeSet::new();
    for slot in &entry.assignments {
        if !policies.contains_key(&slot.policy) {
            return Err(RoutingError::UnknownPolicy(slot.policy.clone()));
        }
        let ids = slot.assignment.entities();
        if ids.is_empty() {
            return Err(RoutingError::EmptyGroup { env: index });
        }
        for id in ids {
            if id >= e_count {
                return Err(RoutingError::EntityOutOfRange { env: index, entity: id });
            }
            if !seen.insert(id) {
                return Err(RoutingError::DuplicateEntity { env: index, entity: id });
            }
        }
    }
    let missing: Vec<usize> = (0..e_count).filter(|e| !seen.contains(e)).collect();
    if !missing.is_empty() {
        return Err(RoutingError::IncompleteCoverage { env: index, missing });
    }
    Ok(())
}

/// Resolves a `MatchSpec` at its own replication factor.
///
/// Ids are dense and replica-major: replica, then entry, then assignment order.
pub fn resolve_plan(spec: &MatchSpec) -> Result<ProcessPlan, RoutingError> {
    if spec.policies.is_empty() {
        return Err(RoutingError::NoPolicies);
    }
    if spec.matches.is_empty() {
        return Err(RoutingError::NoMatches);
    }
    if spec.replication == 0 {
        return Err(RoutingError::InvalidReplication);
    }
    for (i, entry) in spec.matches.iter().enumerate() {
        check_entry(i, entry, &spec.policies)?;
    }
    let mut plan = ProcessPlan {
        policies: spec.policies.clone(),
        env_nodes: vec![],
        worker_nodes: vec![],
        env_groups: BTreeMap::new(),
        policy_groups: BTreeMap::new(),
    };
    for _replica in 0..spec.replication {
        for entry in &spec.matches {
            let env_id = plan.env_nodes.len();
            plan.env_nodes.push(EnvNode { id: env_id, env: entry.env.clone() });
            let members = plan.env_groups.entry(env_id).or_default();
            for slot in &entry.assignments {
                let id = plan.worker_nodes.len();
                plan.worker_nodes.push(WorkerNode {
                    id,
                    policy: slot.policy.clone(),
                    env_id,
                    assignment: slot.assignment.clone(),
                });
                members.push(id);
                plan.policy_groups.entry(slot.policy.clone()).or_default().push(id);
            }
        }
    }
    Ok(plan)
}

/// Resolves `spec` duplicated `n` times; policy groups span all replicas.
pub fn replicate(spec: &MatchSpec, n: usize) -> Result<ProcessPlan, RoutingError> {
    resolve_plan(&MatchSpec { replication: n, ..spec.clone() })
}

/// One entry per unordered pair of policies, in lexicographic order. The
/// first policy of a pair commands team A (entities `0..team_size`), the
/// second team B (`team_size..2 * team_size`), one worker per entity.
pub fn round_robin_pairings(policy_names: &[String], team_size: usize, env: &EnvConfig) -> Result<Vec<MatchEntry>, RoutingError> {
    let mut names: Vec<&String> = policy_names.iter().collect();
    names.sort();
    names.dedup();
    if names.len() < 2 {
        return Err(RoutingError::TooFewPolicies(names.len()));
    }
    let mut out = vec![];
    for i in 0..names.len() {
        for j in i + 1..names.len() {
            let assignments = (0..team_size)
                .map(|e| SlotAssignment::single(names[i], e))
                .chain((0..team_size).map(|e| SlotAssignment::single(names[j], team_size + e)))
                .collect();
            out.push(MatchEntry { env: env.clone(), assignments });
        }
    }
    Ok(out)
}

/// Stable, human-readable listing of nodes and groups.
pub fn plan_summary(plan: &ProcessPlan) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "nodes: {} ({} env, {} worker)", plan.node_count(), plan.env_nodes.len(), plan.worker_nodes.len());
    for env in &plan.env_nodes {
        let members = &plan.env_groups[&env.id];
        let list: Vec<String> = members
            .iter()
            .map(|w| {
                let node = &plan.worker_nodes[*w];
                format!("w{}:{}{:?}", w, node.policy, node.assignment.entities())
            })
            .collect();
        let _ = writeln!(s, "env {} {}: {}", env.id, env.env.kind_name(), list.join(" "));
    }
    for (policy, members) in &plan.policy_groups {
        let sizes: BTreeSet<(bool, usize)> = members
            .iter()
            .map(|w| {
                let a = &plan.worker_nodes[*w].assignment;
                (a.is_group(), a.entities().len())
            })
            .collect();
        let shape = match (sizes.len(), sizes.iter().next()) {
            (1, Some((true, n))) => format!("grouped, {n} entities each"),
            (1, Some((false, _))) => "single".to_string(),
            _ => "mixed".to_string(),
        };
        let word = if members.len() == 1 { "worker" } else { "workers" };
        let _ = writeln!(s, "policy {policy}: {} {word} ({shape})", members.len());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{CoopNavConfig, EchoConfig};
    use crate::learners::{Algorithm, HyperParams, ScriptedKind};

    fn trainable() -> PolicyKind {
        PolicyKind::Trainable { algorithm: Algorithm::Ppo, hyper: HyperParams::default() }
    }

    fn echo(e: usize) -> EnvConfig {
        EnvConfig::Echo(EchoConfig { n_entities: e, ..Default::default() })
    }

    fn policies(names: &[&str]) -> BTreeMap<String, PolicyKind> {
        names.iter().map(|n| (n.to_string(), trainable())).collect()
    }

    fn coop_grouped(entries: usize, n: usize) -> MatchSpec {
        let entry = MatchEntry { env: EnvConfig::CoopNav(CoopNavConfig::default()), assignments: vec![SlotAssignment::group("P", &[0, 1, 2])] };
        MatchSpec { policies: policies(&["P"]), matches: vec![entry; entries], replication: n }
    }

    #[test]
    fn round_robin_four_policies_is_thirty_nodes() {
        let names: Vec<String> = ["d", "a", "c", "b"].iter().map(|s| s.to_string()).collect();
        let matches = round_robin_pairings(&names, 2, &echo(4)).unwrap();
        assert_eq!(matches.len(), 6);
        let spec = MatchSpec { policies: policies(&["a", "b", "c", "d"]), matches, replication: 1 };
        let plan = resolve_plan(&spec).unwrap();
        assert_eq!((plan.env_nodes.len(), plan.worker_nodes.len()), (6, 24));
        assert!(plan_summary(&plan).starts_with("nodes: 30 (6 env, 24 worker)\n"));
        let p3 = replicate(&spec, 3).unwrap();
        assert_eq!((p3.env_nodes.len(), p3.worker_nodes.len(), p3.node_count()), (18, 72, 90));
        assert!(p3.policy_groups.values().all(|m| m.len() == 18));
    }

    #[test]
    fn five_policies_pair_lexicographically() {
        let names: Vec<String> = ["e", "b", "a", "d", "c"].iter().map(|s| s.to_string()).collect();
        let m = round_robin_pairings(&names, 1, &echo(2)).unwrap();
        let pairs: Vec<(String, String)> = m.iter().map(|e| (e.assignments[0].policy.clone(), e.assignments[1].policy.clone())).collect();
        let mut want = vec![];
        let sorted = ["a", "b", "c", "d", "e"];
        for i in 0..5 {
            for j in 0..5 {
                if i < j {
                    want.push((sorted[i].to_string(), sorted[j].to_string()));
                }
            }
        }
        assert_eq!(pairs, want);
        assert_eq!(round_robin_pairings(&names[..1], 2, &echo(4)), Err(RoutingError::TooFewPolicies(1)));
    }

    #[test]
    fn grouped_coop_nav_replication_equals_explicit_entries() {
        let explicit = resolve_plan(&coop_grouped(8, 1)).unwrap();
        let replicated = replicate(&coop_grouped(1, 1), 8).unwrap();
        assert_eq!(explicit, replicated);
        assert_eq!(explicit.policy_groups["P"].len(), 8);
        assert!(plan_summary(&explicit).contains("policy P: 8 workers (grouped, 3 entities each)"));
    }

    #[test]
    fn degenerate_single_agent() {
        let spec = MatchSpec {
            policies: policies(&["p"]),
            matches: vec![MatchEntry { env: echo(1), assignments: vec![SlotAssignment::single("p", 0)] }],
            replication: 1,
        };
        let plan = resolve_plan(&spec).unwrap();
        assert_eq!(plan.node_count(), 2);
        assert_eq!(plan.env_groups[&0], vec![0]);
    }

    #[test]
    fn coverage_errors() {
        let mk = |assignments| MatchSpec {
            policies: policies(&["p"]),
            matches: vec![MatchEntry { env: echo(3), assignments }],
            replication: 1,
        };
        assert_eq!(
            resolve_plan(&mk(vec![SlotAssignment::single("p", 0)])),
            Err(RoutingError::IncompleteCoverage { env: 0, missing: vec![1, 2] })
        );
        assert_eq!(
            resolve_plan(&mk(vec![SlotAssignment::group("p", &[0, 1]), SlotAssignment::group("p", &[1, 2])])),
            Err(RoutingError::DuplicateEntity { env: 0, entity: 1 })
        );
        assert_eq!(
            resolve_plan(&mk(vec![SlotAssignment::group("q", &[0, 1, 2])])),
            Err(RoutingError::UnknownPolicy("q".into()))
        );
        let empty = MatchSpec { policies: BTreeMap::new(), ..mk(vec![]) };
        assert_eq!(resolve_plan(&empty), Err(RoutingError::NoPolicies));
    }

    #[test]
    fn figure_two_configurations_partition_entities() {
        // A: one policy per entity; B: one shared policy, one worker per entity;
        // C: one grouped worker alongside single workers.
        let mut pols = policies(&["x", "y", "z"]);
        pols.insert("s".into(), PolicyKind::Scripted { behavior: ScriptedKind::Static });
        let configs = [
            vec![SlotAssignment::single("x", 0), SlotAssignment::single("y", 1), SlotAssignment::single("z", 2), SlotAssignment::single("s", 3)],
            vec![SlotAssignment::single("x", 0), SlotAssignment::single("x", 1), SlotAssignment::single("x", 2), SlotAssignment::single("x", 3)],
            vec![SlotAssignment::group("x", &[2, 0]), SlotAssignment::single("y", 1), SlotAssignment::single("s", 3)],
        ];
        for assignments in configs {
            let spec = MatchSpec { policies: pols.clone(), matches: vec![MatchEntry { env: echo(4), assignments }], replication: 2 };
            let plan = resolve_plan(&spec).unwrap();
            for env in &plan.env_nodes {
                let mut ids: Vec<usize> =
                    plan.env_groups[&env.id].iter().flat_map(|w| plan.worker_nodes[*w].assignment.entities()).collect();
                ids.sort();
                assert_eq!(ids, vec![0, 1, 2, 3]);
            }
            assert_eq!(plan, resolve_plan(&spec).unwrap());
            assert_eq!(plan.node_count(), 2 * replicate(&spec, 1).unwrap().node_count());
        }
    }

    #[test]
    fn assignment_json_shape() {
        let s: SlotAssignment = serde_json::from_str(r#"{"policy":"p","group":[0,1,2]}"#).unwrap();
        assert_eq!(s, SlotAssignment::group("p", &[0, 1, 2]));
        let t: SlotAssignment = serde_json::from_str(r#"{"policy":"p","single":3}"#).unwrap();
        assert_eq!(t.assignment, EntityAssignment::Single(3));
    }
}
