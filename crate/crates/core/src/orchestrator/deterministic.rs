//! Single-thread scheduler that steps every node cooperatively.

use std::collections::BTreeMap;

use crate::interface::StepBatch;
use crate::learners::collective::allreduce_mean;

use super::server::{EnvServer, WorkerReply};
use super::wire::{EnvReport, NodeDescriptor, Role};
use super::worker::WorkerCore;
use super::{OrchestratorError, RoundOutcome, Teardown};

/// Replies cross a frame boundary exactly as they would between processes.
fn through_frame(r: WorkerReply) -> Result<WorkerReply, OrchestratorError> {
    let batch = StepBatch::from_frame(&r.batch.to_frame())?;
    Ok(WorkerReply { batch, ..r })
}

/// Runs one round in lock-step: every tick serves all live envs in id order,
/// delivers replies, runs the policy-group updates of the workers that were
/// served (groups in name order), and collects the next actions.
pub fn run(descriptors: &[NodeDescriptor]) -> Result<RoundOutcome, OrchestratorError> {
    let mut servers = vec![];
    let mut workers: BTreeMap<usize, WorkerCore> = BTreeMap::new();
    for d in descriptors {
        // same descriptor bytes the multiprocess transport ships
        let d = NodeDescriptor::from_json(&d.to_json()).map_err(|e| OrchestratorError::ProtocolViolation(e.to_string()))?;
        match d.role {
            Role::Env(e) => servers.push(EnvServer::new(e.env_id, &e.env, e.members, d.run_seed, d.round, e.share)?),
            Role::Worker(w) => {
                let core = WorkerCore::new(w, d.round, Box::new(|tick| tick as f64))?;
                workers.insert(core.id(), core);
            }
        }
    }
    servers.sort_by_key(|s| s.env_id());
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for w in workers.values() {
        groups.entry(w.policy().to_string()).or_default().push(w.id());
    }

    let mut reports = vec![];
    let mut pending: BTreeMap<usize, BTreeMap<usize, Vec<crate::interface::Value>>> = BTreeMap::new();
    let mut first = true;
    loop {
        let mut served = vec![];
        for s in servers.iter_mut().filter(|s| !s.is_stopped()) {
            let replies = if first { s.start()? } else { s.serve(&pending.remove(&s.env_id()).unwrap_or_default())? };
            for r in replies {
                let r = through_frame(r)?;
                let w = workers.get_mut(&r.worker).ok_or(OrchestratorError::ProtocolViolation(format!("no worker {}", r.worker)))?;
                w.receive(r.batch, r.stop, r.tick)?;
                served.push(r.worker);
            }
        }
        first = false;
        if served.is_empty() {
            break;
        }
        served.sort_unstable();
        for members in groups.values() {
            let live: Vec<usize> = members.iter().copied().filter(|m| served.binary_search(m).is_ok()).collect();
            update_group(&mut workers, &live)?;
        }
        for id in served {
            let w = &mut workers.get_mut(&id).expect("served worker exists");
            if w.is_stopping() {
                let w = workers.remove(&id).expect("served worker exists");
                reports.push(w.into_report());
            } else {
                let actions = w.act()?;
                pending.entry(w.env_id()).or_default().insert(id, actions);
            }
        }
    }
    if let Some(w) = workers.keys().next() {
        return Err(OrchestratorError::ProtocolViolation(format!("worker {w} was never stopped")));
    }
    let envs = servers.iter().map(|s| EnvReport { env_id: s.env_id(), steps: s.steps(), episodes: s.episodes() }).collect();
    Ok(RoundOutcome { workers: reports, envs, teardown: Teardown::default() })
}

fn update_group(workers: &mut BTreeMap<usize, WorkerCore>, live: &[usize]) -> Result<(), OrchestratorError> {
    loop {
        let wants: Vec<bool> = live.iter().map(|m| workers[m].wants_update()).collect();
        if !wants.iter().any(|w| *w) {
            return Ok(());
        }
        if !wants.iter().all(|w| *w) {
            return Err(OrchestratorError::ProtocolViolation("policy group disagrees on update timing".into()));
        }
        let phases: Vec<usize> = live.iter().map(|m| workers.get_mut(m).unwrap().begin_update()).collect();
        if phases.iter().any(|p| *p != phases[0]) {
            return Err(OrchestratorError::ProtocolViolation("policy group disagrees on phase count".into()));
        }
        for p in 0..phases[0] {
            let grads: Vec<_> = live.iter().map(|m| workers.get_mut(m).unwrap().gradient(p).1).collect();
            let mean = allreduce_mean(&grads)?;
            for m in live {
                workers.get_mut(m).unwrap().apply(p, &mean.values);
            }
        }
        for m in live {
            workers.get_mut(m).unwrap().end_update();
        }
    }
}
