use std::path::Path;
use std::time::Duration;

use arena::config::{load_config, RunConfig};
use arena::orchestrator::{MultiprocessOptions, NoHook, Orchestrator, OrchestratorError, RoundConfig, Transport};

fn multiprocess(dir: &Path) -> Transport {
    Transport::Multiprocess(MultiprocessOptions {
        node_bin: env!("CARGO_BIN_EXE_arena").into(),
        log_dir: dir.join("logs"),
        timeout: Duration::from_secs(60),
    })
}

fn config(policies: &str, matches: &str, replication: usize) -> RunConfig {
    load_config(&format!(
        r#"{{"schema_version": 1, "seed": 11, "replication": {replication},
            "policies": {policies}, "matches": {matches}, "rounds": {{"step_budget": 100}}}}"#
    ))
    .unwrap()
}

fn echo_config() -> RunConfig {
    config(
        r#"{"s": {"kind": "scripted", "behavior": "random"}, "z": {"kind": "scripted", "behavior": "static"}}"#,
        r#"[{"env": {"kind": "echo", "n_entities": 3, "horizon": 3},
             "assignments": [{"policy": "s", "single": 0}, {"policy": "z", "group": [2, 1]}]}]"#,
        1,
    )
}

fn ppo_config() -> RunConfig {
    config(
        r#"{"p": {"kind": "trainable", "algorithm": "ppo", "hyper": {"ppo_horizon": 32, "ppo_minibatch": 16, "ppo_epochs": 2, "actor_hidden": [8]}}}"#,
        r#"[{"env": {"kind": "cart_pole"}, "assignments": [{"policy": "p", "single": 0}]}]"#,
        2,
    )
}

fn masac_config() -> RunConfig {
    config(
        r#"{"m": {"kind": "trainable", "algorithm": "masac", "hyper": {"batch_size": 8, "warmup": 20, "actor_hidden": [8], "critic_hidden": [8]}}}"#,
        r#"[{"env": {"kind": "coop_nav", "episode_len": 25}, "assignments": [{"policy": "m", "group": [0, 1, 2]}]}]"#,
        2,
    )
}

fn orchestrator(cfg: &RunConfig, dir: &Path, transport: Transport) -> Orchestrator {
    Orchestrator::new(cfg.plan().unwrap(), cfg.seed, transport, &dir.join("ckpt")).unwrap().with_log_every(1)
}

#[test]
fn budget_rounds_up_to_episode_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        r#"{"s": {"kind": "scripted", "behavior": "random"}}"#,
        r#"[{"env": {"kind": "echo", "horizon": 3}, "assignments": [{"policy": "s", "single": 0}]}]"#,
        1,
    );
    let r = orchestrator(&cfg, dir.path(), Transport::Deterministic).run_round(&RoundConfig::new(0, 10)).unwrap();
    assert_eq!((r.steps, r.env_episodes), (12, 4));
    assert!(r.steps >= r.step_budget);
    assert!(r.checkpoints.is_empty());
}

#[test]
fn mixed_assignments_share_one_env() {
    let dir = tempfile::tempdir().unwrap();
    let r = orchestrator(&echo_config(), dir.path(), Transport::Deterministic).run_round(&RoundConfig::new(0, 30)).unwrap();
    assert_eq!(r.steps, 30);
    assert_eq!(r.policies["s"].episodes, 10);
    assert_eq!(r.policies["z"].episodes, 10);
    // static actions are canonical nulls: index 0, reward 0
    assert!(r.policies["z"].scores.iter().all(|s| *s == 0.0));
}

#[test]
fn second_round_restores_the_first() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ppo_config();
    let mut o = orchestrator(&cfg, dir.path(), Transport::Deterministic);
    let reports = o.run_rounds(&[RoundConfig::new(0, 200), RoundConfig::new(1, 200)], &mut NoHook).unwrap();
    let v0 = reports[0].versions["p"];
    let v1 = reports[1].versions["p"];
    assert!(v0 > 0);
    assert!(v1 > v0, "versions {v0} then {v1}");
}

#[test]
fn frozen_only_plan_reports_scores_without_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ppo_config();
    orchestrator(&cfg, dir.path(), Transport::Deterministic).run_round(&RoundConfig::new(0, 100)).unwrap();
    let ckpt = dir.path().join("ckpt/p.ckpt");
    let frozen = config(
        &format!(r#"{{"f": {{"kind": "frozen", "checkpoint": {:?}}}}}"#, ckpt.display().to_string()),
        r#"[{"env": {"kind": "cart_pole"}, "assignments": [{"policy": "f", "single": 0}]}]"#,
        1,
    );
    let fdir = tempfile::tempdir().unwrap();
    let r = orchestrator(&frozen, fdir.path(), Transport::Deterministic).run_round(&RoundConfig::new(0, 100)).unwrap();
    assert!(r.policies["f"].episodes > 0);
    assert!(r.checkpoints.is_empty());
    assert!(r.versions.is_empty());
}

fn same_outcome(cfg: &RunConfig, budget: u64) {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = orchestrator(cfg, a.path(), Transport::Deterministic).run_round(&RoundConfig::new(0, budget)).unwrap();
    let rb = orchestrator(cfg, b.path(), multiprocess(b.path())).run_round(&RoundConfig::new(0, budget)).unwrap();
    assert_eq!(ra.steps, rb.steps);
    assert_eq!(ra.policies, rb.policies);
    assert_eq!(ra.versions, rb.versions);
    for p in ra.checkpoints.keys() {
        assert_eq!(std::fs::read(&ra.checkpoints[p]).unwrap(), std::fs::read(&rb.checkpoints[p]).unwrap(), "checkpoint {p}");
    }
    assert_eq!(rb.teardown.registry_len, 0);
    assert!(rb.teardown.orphans.is_empty());
}

#[test]
fn transports_agree_on_scripted_play() {
    same_outcome(&echo_config(), 30);
}

#[test]
fn transports_agree_on_ppo_collectives() {
    same_outcome(&ppo_config(), 300);
}

#[test]
fn transports_agree_on_masac_collectives() {
    same_outcome(&masac_config(), 200);
}

#[test]
fn failing_node_is_reported_as_crash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        r#"{"f": {"kind": "frozen", "checkpoint": "/nonexistent/f.ckpt"}}"#,
        r#"[{"env": {"kind": "cart_pole"}, "assignments": [{"policy": "f", "single": 0}]}]"#,
        1,
    );
    let err = orchestrator(&cfg, dir.path(), multiprocess(dir.path())).run_round(&RoundConfig::new(0, 10)).unwrap_err();
    assert!(matches!(err, OrchestratorError::NodeCrash { ref node, .. } if node == "worker-0"), "{err}");
}
