//! Declarative run configuration (JSON).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::EnvConfig;
use crate::learners::PolicyKind;
use crate::orchestrator::RoundConfig;
use crate::routing::{resolve_plan, round_robin_pairings, MatchEntry, MatchSpec, ProcessPlan, RoutingError};
use crate::schemes::{generation_schedule, CurriculumSchedule};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("parse error at {location}: {message}")]
    ParseError { location: String, message: String },
    #[error("invalid {field}: {reason}")]
    ValidationError { field: String, reason: String },
    #[error("io: {0}")]
    Io(String),
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError::ValidationError { field: field.into(), reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportMode {
    #[default]
    Deterministic,
    Multiprocess,
}

impl TransportMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "deterministic" => Some(TransportMode::Deterministic),
            "multiprocess" => Some(TransportMode::Multiprocess),
            _ => None,
        }
    }
}

/// Pairwise tournament generated instead of (or in addition to) explicit matches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundRobin {
    pub policies: Vec<String>,
    pub env: EnvConfig,
    #[serde(default = "one")]
    pub team_size: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rounds {
    #[serde(default = "one_u64")]
    pub count: u64,
    pub step_budget: u64,
}

fn one_u64() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SchemeConfig {
    #[default]
    None,
    Curriculum { key: String, values: Vec<f64> },
    Evolution { members: Vec<String>, total_steps: u64, generation_period: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub transport: TransportMode,
    #[serde(default = "one")]
    pub replication: usize,
    pub policies: BTreeMap<String, PolicyKind>,
    #[serde(default)]
    pub matches: Vec<MatchEntry>,
    #[serde(default)]
    pub round_robin: Option<RoundRobin>,
    #[serde(default)]
    pub rounds: Option<Rounds>,
    #[serde(default)]
    pub scheme: SchemeConfig,
    /// Env parameters applied in every round.
    #[serde(default)]
    pub env_params: BTreeMap<String, f64>,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_log_every() -> u64 {
    100
}

fn default_timeout() -> f64 {
    60.0
}

impl RunConfig {
    /// Explicit matches followed by the generated round-robin entries.
    pub fn all_matches(&self) -> Result<Vec<MatchEntry>, ConfigError> {
        let mut m = self.matches.clone();
        if let Some(rr) = &self.round_robin {
            m.extend(round_robin_pairings(&rr.policies, rr.team_size, &rr.env).map_err(|e| invalid("round_robin", e.to_string()))?);
        }
        Ok(m)
    }

    pub fn match_spec(&self) -> Result<MatchSpec, ConfigError> {
        Ok(MatchSpec { policies: self.policies.clone(), matches: self.all_matches()?, replication: self.replication })
    }

    pub fn plan(&self) -> Result<ProcessPlan, ConfigError> {
        let spec = self.match_spec()?;
        resolve_plan(&spec).map_err(|e| routing_field(&e, &spec))
    }

    /// Rounds to run, before scheme hooks adjust them.
    pub fn schedule(&self) -> Result<Vec<RoundConfig>, ConfigError> {
        let mut rounds = match (&self.scheme, &self.rounds) {
            (SchemeConfig::Evolution { total_steps, generation_period, .. }, _) => {
                generation_schedule(*total_steps, *generation_period).map_err(|e| invalid("scheme.generation_period", e.to_string()))?
            }
            (_, Some(r)) => (0..r.count).map(|i| RoundConfig::new(i, r.step_budget)).collect(),
            (_, None) => return Err(invalid("rounds", "required unless the scheme is evolution")),
        };
        for r in &mut rounds {
            r.env_params.extend(self.env_params.iter().map(|(k, v)| (k.clone(), *v)));
        }
        Ok(rounds)
    }

    pub fn curriculum(&self) -> Option<CurriculumSchedule> {
        match &self.scheme {
            SchemeConfig::Curriculum { key, values } => Some(CurriculumSchedule { key: key.clone(), values: values.clone() }),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid("schema_version", format!("expected {SCHEMA_VERSION}")));
        }
        if self.policies.is_empty() {
            return Err(invalid("policies", "at least one policy is required"));
        }
        for (name, kind) in &self.policies {
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(invalid(format!("policies.{name}"), "names use [A-Za-z0-9_-]"));
            }
            if let PolicyKind::Trainable { hyper, .. } = kind {
                hyper.validate().map_err(|r| invalid(format!("policies.{name}"), r))?;
            }
        }
        let matches = self.all_matches()?;
        for (i, m) in matches.iter().enumerate() {
            for slot in &m.assignments {
                match self.policies.get(&slot.policy) {
                    None => return Err(invalid(format!("matches[{i}]"), "unknown policy")),
                    Some(PolicyKind::Trainable { algorithm, .. }) => {
                        if algorithm.needs_group() && !slot.assignment.is_group() {
                            return Err(invalid(format!("matches[{i}]"), format!("{} needs a group assignment", algorithm.tag())));
                        }
                        if algorithm.needs_single() && slot.assignment.is_group() {
                            return Err(invalid(format!("matches[{i}]"), format!("{} needs a single assignment", algorithm.tag())));
                        }
                    }
                    Some(_) => {}
                }
            }
        }
        let plan = self.plan()?;
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(invalid("timeout_secs", "must be > 0"));
        }
        let known = |key: &str| plan.env_nodes.iter().any(|e| e.env.param(key).is_some());
        for key in self.env_params.keys() {
            if !known(key) {
                return Err(invalid(format!("env_params.{key}"), "no env has this parameter"));
            }
        }
        let schedule = self.schedule()?;
        if schedule.iter().any(|r| r.step_budget == 0) {
            return Err(invalid("rounds.step_budget", "must be >= 1"));
        }
        match &self.scheme {
            SchemeConfig::None => {}
            SchemeConfig::Curriculum { key, values } => {
                if !known(key) {
                    return Err(invalid("scheme.key", "no env has this parameter"));
                }
                if values.len() as u64 != schedule.len() as u64 {
                    return Err(invalid("scheme.values", format!("{} values for {} rounds", values.len(), schedule.len())));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(invalid("scheme.values", "values must be finite"));
                }
            }
            SchemeConfig::Evolution { members, .. } => {
                if members.len() < 2 {
                    return Err(invalid("scheme.members", "need at least two members"));
                }
                for m in members {
                    if !self.policies.get(m).is_some_and(PolicyKind::is_trainable) {
                        return Err(invalid("scheme.members", format!("{m:?} is not a trainable policy")));
                    }
                    if !plan.policy_groups.contains_key(m) {
                        return Err(invalid("scheme.members", format!("{m:?} plays in no match")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Pretty JSON with every default filled in; loads back to an equal config.
    pub fn effective_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn write_effective(&self, dir: &Path) -> Result<PathBuf, ConfigError> {
        std::fs::create_dir_all(dir).map_err(|e| ConfigError::Io(e.to_string()))?;
        let path = dir.join("effective_config.json");
        std::fs::write(&path, self.effective_json()).map_err(|e| ConfigError::Io(e.to_string()))?;
        Ok(path)
    }
}

fn routing_field(e: &RoutingError, spec: &MatchSpec) -> ConfigError {
    match e {
        RoutingError::UnknownPolicy(p) => {
            let i = spec.matches.iter().position(|m| m.assignments.iter().any(|a| &a.policy == p)).unwrap_or(0);
            invalid(format!("matches[{i}]"), "unknown policy")
        }
        RoutingError::IncompleteCoverage { env, .. }
        | RoutingError::DuplicateEntity { env, .. }
        | RoutingError::EntityOutOfRange { env, .. }
        | RoutingError::EmptyGroup { env }
        | RoutingError::InvalidEnv { env, .. } => invalid(format!("matches[{env}]"), e.to_string()),
        RoutingError::NoPolicies => invalid("policies", e.to_string()),
        RoutingError::NoMatches => invalid("matches", e.to_string()),
        RoutingError::TooFewPolicies(_) => invalid("round_robin", e.to_string()),
        RoutingError::InvalidReplication => invalid("replication", e.to_string()),
    }
}

/// Parses and validates a JSON document.
pub fn load_config(text: &str) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig = serde_json::from_str(text)
        .map_err(|e| ConfigError::ParseError { location: format!("line {} column {}", e.line(), e.column()), message: e.to_string() })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config_file(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
    load_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MASAC: &str = r#"{
        "schema_version": 1,
        "seed": 3,
        "replication": 8,
        "policies": {"masac": {"kind": "trainable", "algorithm": "masac"}},
        "matches": [{"env": {"kind": "coop_nav"}, "assignments": [{"policy": "masac", "group": [0, 1, 2]}]}],
        "rounds": {"step_budget": 1000}
    }"#;

    #[test]
    fn grouped_config_resolves() {
        let cfg = load_config(MASAC).unwrap();
        let plan = cfg.plan().unwrap();
        assert_eq!((plan.env_nodes.len(), plan.worker_nodes.len()), (8, 8));
    }

    #[test]
    fn independent_config_resolves() {
        let text = r#"{
            "schema_version": 1,
            "replication": 6,
            "policies": {"sac": {"kind": "trainable", "algorithm": "sac"}},
            "matches": [{"env": {"kind": "coop_nav"}, "assignments": [
                {"policy": "sac", "single": 0}, {"policy": "sac", "single": 1}, {"policy": "sac", "single": 2}]}],
            "rounds": {"step_budget": 1000}
        }"#;
        let plan = load_config(text).unwrap().plan().unwrap();
        assert_eq!((plan.env_nodes.len(), plan.worker_nodes.len()), (6, 18));
    }

    #[test]
    fn unknown_policy_points_at_the_entry() {
        let text = MASAC.replace(r#""policy": "masac""#, r#""policy": "nope""#);
        assert_eq!(load_config(&text).unwrap_err(), invalid("matches[0]", "unknown policy"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MASAC.replace(r#""seed": 3,"#, r#""seed": 3, "sed": 4,"#);
        assert!(matches!(load_config(&text), Err(ConfigError::ParseError { .. })));
        let text = MASAC.replace(r#""algorithm": "masac""#, r#""algorithm": "masac", "hyper": {"lr": 0.1, "lrr": 1}"#);
        assert!(matches!(load_config(&text), Err(ConfigError::ParseError { .. })));
    }

    #[test]
    fn effective_config_is_idempotent() {
        let cfg = load_config(MASAC).unwrap();
        let again = load_config(&cfg.effective_json()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.plan().unwrap(), cfg.plan().unwrap());
        assert_eq!(again.effective_json(), cfg.effective_json());
    }

    #[test]
    fn curriculum_length_must_match_rounds() {
        let text = MASAC.replace(
            r#""rounds": {"step_budget": 1000}"#,
            r#""rounds": {"count": 7, "step_budget": 1000},
               "scheme": {"kind": "curriculum", "key": "collision_penalty_weight", "values": [0, 0.05, 0.1]}"#,
        );
        assert_eq!(load_config(&text).unwrap_err(), invalid("scheme.values", "3 values for 7 rounds"));
    }

    #[test]
    fn evolution_rounds_follow_generations() {
        let text = r#"{
            "schema_version": 1,
            "policies": {
                "a": {"kind": "trainable", "algorithm": "ppo"},
                "b": {"kind": "trainable", "algorithm": "ppo"}},
            "matches": [
                {"env": {"kind": "cart_pole"}, "assignments": [{"policy": "a", "single": 0}]},
                {"env": {"kind": "cart_pole"}, "assignments": [{"policy": "b", "single": 0}]}],
            "scheme": {"kind": "evolution", "members": ["a", "b"], "total_steps": 60000, "generation_period": 10000}
        }"#;
        let cfg = load_config(text).unwrap();
        assert_eq!(cfg.schedule().unwrap().len(), 6);
    }

    #[test]
    fn syntax_errors_carry_a_location() {
        let ConfigError::ParseError { location, .. } = load_config("{\n  \"schema_version\": ,\n}").unwrap_err() else {
            panic!("expected a parse error")
        };
        assert_eq!(location, "line 2 column 21");
    }
}
