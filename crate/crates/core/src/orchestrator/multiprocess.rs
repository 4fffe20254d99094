//! Multi-process transport: one OS process per node, star-routed through a
//! hub in the launching process over loopback TCP.
//!
//! The hub forwards actions and replies inside env groups and computes the
//! mean-reduction collectives of policy groups. Collective steps are keyed
//! by (policy, sequence number); a worker that leaves announces how many
//! steps it took part in so later steps stop waiting for it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::{Duration, Instant};

use crate::interface::{StepBatch, Value};
use crate::learners::collective::{allreduce_mean, GradVector};

use super::server::EnvServer;
use super::wire::{read_msg, write_msg, EnvReport, FromHub, NodeDescriptor, NodeId, ReplyMsg, Role, ToHub, WorkerReport};
use super::worker::WorkerCore;
use super::{OrchestratorError, RoundOutcome, Teardown};

/// Selects the transport in the `ARENA_TRANSPORT` variable.
pub const TRANSPORT_VAR: &str = "ARENA_TRANSPORT";
/// Directory for per-node stderr logs.
pub const LOG_DIR_VAR: &str = "ARENA_LOG_DIR";

#[derive(Debug, Clone)]
pub struct MultiprocessOptions {
    /// Executable that understands `node --hub <addr>`.
    pub node_bin: PathBuf,
    pub log_dir: PathBuf,
    pub timeout: Duration,
}

enum Event {
    Hello(NodeId, u32, TcpStream),
    Msg(NodeId, ToHub),
    Closed(NodeId, String),
}

fn io_err(e: std::io::Error) -> OrchestratorError {
    OrchestratorError::Io(e.to_string())
}

fn log_path(dir: &Path, node: NodeId) -> PathBuf {
    dir.join(format!("node-{node}.log"))
}

fn log_tail(dir: &Path, node: NodeId) -> String {
    let text = std::fs::read_to_string(log_path(dir, node)).unwrap_or_default();
    let lines: Vec<&str> = text.lines().collect();
    lines[lines.len().saturating_sub(10)..].join("\n")
}

fn accept_loop(listener: TcpListener, expected: usize, events: mpsc::Sender<Event>, stop: Arc<AtomicBool>) {
    let mut accepted = 0;
    while accepted < expected && !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, _)) => {
                accepted += 1;
                let events = events.clone();
                thread::spawn(move || reader_loop(stream, events));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(2)),
            Err(_) => return,
        }
    }
}

fn reader_loop(stream: TcpStream, events: mpsc::Sender<Event>) {
    if stream.set_nonblocking(false).is_err() {
        return;
    }
    let _ = stream.set_nodelay(true);
    let Ok(writer) = stream.try_clone() else { return };
    let mut input = BufReader::new(stream);
    let node = match read_msg::<_, ToHub>(&mut input) {
        Ok(ToHub::Hello { node, pid }) => {
            if events.send(Event::Hello(node, pid, writer)).is_err() {
                return;
            }
            node
        }
        _ => return,
    };
    loop {
        match read_msg::<_, ToHub>(&mut input) {
            Ok(msg) => {
                if events.send(Event::Msg(node, msg)).is_err() {
                    return;
                }
            }
            Err(e) => {
                let _ = events.send(Event::Closed(node, e.to_string()));
                return;
            }
        }
    }
}

struct Hub<'a> {
    opts: &'a MultiprocessOptions,
    registry: BTreeMap<NodeId, Child>,
    pids: BTreeMap<NodeId, u32>,
    writers: BTreeMap<NodeId, TcpStream>,
    worker_env: BTreeMap<usize, usize>,
    worker_policy: BTreeMap<usize, String>,
    policy_members: BTreeMap<String, Vec<usize>>,
    pending: BTreeMap<(String, u64), Vec<(usize, GradVector)>>,
    left: BTreeSet<usize>,
    reported: BTreeSet<NodeId>,
    workers: Vec<WorkerReport>,
    envs: Vec<EnvReport>,
}

impl Hub<'_> {
    fn send(&mut self, node: NodeId, msg: &FromHub) -> Result<(), OrchestratorError> {
        let w = self.writers.get_mut(&node).ok_or_else(|| OrchestratorError::ProtocolViolation(format!("no connection to {node}")))?;
        write_msg(w, msg).map_err(|e| OrchestratorError::NodeCrash { node: node.to_string(), diagnostic: e.to_string() })
    }

    fn try_complete(&mut self, policy: &str) -> Result<(), OrchestratorError> {
        let active: Vec<usize> = self.policy_members[policy].iter().copied().filter(|m| !self.left.contains(m)).collect();
        let ready: Vec<(String, u64)> = self
            .pending
            .iter()
            .filter(|((p, _), contribs)| p == policy && active.iter().all(|m| contribs.iter().any(|(w, _)| w == m)))
            .map(|(k, _)| k.clone())
            .collect();
        for key in ready {
            let contribs = self.pending.remove(&key).expect("ready key present");
            let grads: Vec<GradVector> = contribs.iter().map(|(_, g)| g.clone()).collect();
            let mean = allreduce_mean(&grads)?;
            for (w, _) in &contribs {
                self.send(NodeId::Worker(*w), &FromHub::Mean { seq: key.1, values: mean.values.clone() })?;
            }
        }
        Ok(())
    }

    fn handle(&mut self, node: NodeId, msg: ToHub) -> Result<(), OrchestratorError> {
        let violation = |what: &str| OrchestratorError::ProtocolViolation(format!("{node}: {what}"));
        match (node, msg) {
            (NodeId::Worker(w), ToHub::Actions { env, worker, actions }) => {
                if worker != w || self.worker_env.get(&w) != Some(&env) {
                    return Err(violation("actions outside its env group"));
                }
                self.send(NodeId::Env(env), &FromHub::Actions { worker, actions })
            }
            (NodeId::Env(e), ToHub::Reply(r)) => {
                if self.worker_env.get(&r.worker) != Some(&e) {
                    return Err(violation("reply outside its env group"));
                }
                self.send(NodeId::Worker(r.worker), &FromHub::Reply(r))
            }
            (NodeId::Worker(w), ToHub::Grad { seq, grad }) => {
                if self.worker_policy.get(&w) != Some(&grad.policy) {
                    return Err(violation("gradient for a foreign policy"));
                }
                let policy = grad.policy.clone();
                self.pending.entry((policy.clone(), seq)).or_default().push((w, grad));
                self.try_complete(&policy)
            }
            (NodeId::Worker(w), ToHub::Leave { policy, count: _ }) => {
                self.left.insert(w);
                self.try_complete(&policy)
            }
            (NodeId::Worker(_), ToHub::Worker(report)) => {
                self.reported.insert(node);
                self.workers.push(report);
                Ok(())
            }
            (NodeId::Env(_), ToHub::Env(report)) => {
                self.reported.insert(node);
                self.envs.push(report);
                Ok(())
            }
            (_, ToHub::Failed(diagnostic)) => Err(OrchestratorError::NodeCrash { node: node.to_string(), diagnostic }),
            (_, other) => Err(violation(&format!("unexpected message {other:?}"))),
        }
    }

    fn kill_all(&mut self) {
        for child in self.registry.values_mut() {
            let _ = child.kill();
        }
        for (_, mut child) in std::mem::take(&mut self.registry) {
            let _ = child.wait();
        }
    }

    /// Waits for every node process to exit and checks that none survived.
    fn reap(&mut self) -> Result<Teardown, OrchestratorError> {
        let deadline = Instant::now() + self.opts.timeout;
        while !self.registry.is_empty() {
            let mut exited = vec![];
            for (node, child) in self.registry.iter_mut() {
                if let Some(status) = child.try_wait().map_err(io_err)? {
                    exited.push((*node, status));
                }
            }
            for (node, status) in exited {
                self.registry.remove(&node);
                if !status.success() {
                    self.kill_all();
                    return Err(OrchestratorError::NodeCrash { node: node.to_string(), diagnostic: format!("exit status {status}") });
                }
            }
            if Instant::now() > deadline {
                self.kill_all();
                return Err(OrchestratorError::Timeout("node processes did not exit".into()));
            }
            if !self.registry.is_empty() {
                thread::sleep(Duration::from_millis(2));
            }
        }
        let orphans = self.pids.values().copied().filter(|pid| Path::new(&format!("/proc/{pid}")).exists() && is_node_process(*pid)).collect();
        Ok(Teardown { registry_len: self.registry.len(), orphans })
    }
}

/// True when `pid` is a live node process launched by this module.
fn is_node_process(pid: u32) -> bool {
    std::fs::read(format!("/proc/{pid}/cmdline")).map(|c| c.split(|b| *b == 0).any(|a| a == b"--hub")).unwrap_or(false)
}

/// Launches every node as a child process and routes the round to its end.
pub fn run(descriptors: &[NodeDescriptor], opts: &MultiprocessOptions) -> Result<RoundOutcome, OrchestratorError> {
    std::fs::create_dir_all(&opts.log_dir).map_err(io_err)?;
    let listener = TcpListener::bind("127.0.0.1:0").map_err(io_err)?;
    listener.set_nonblocking(true).map_err(io_err)?;
    let addr = listener.local_addr().map_err(io_err)?.to_string();
    let (tx, rx) = mpsc::channel();
    let stop = Arc::new(AtomicBool::new(false));
    let accept = {
        let stop = stop.clone();
        let n = descriptors.len();
        thread::spawn(move || accept_loop(listener, n, tx, stop))
    };

    let mut hub = Hub {
        opts,
        registry: BTreeMap::new(),
        pids: BTreeMap::new(),
        writers: BTreeMap::new(),
        worker_env: BTreeMap::new(),
        worker_policy: BTreeMap::new(),
        policy_members: BTreeMap::new(),
        pending: BTreeMap::new(),
        left: BTreeSet::new(),
        reported: BTreeSet::new(),
        workers: vec![],
        envs: vec![],
    };
    for d in descriptors {
        if let Role::Worker(w) = &d.role {
            hub.worker_env.insert(w.worker_id, w.env_id);
            hub.worker_policy.insert(w.worker_id, w.policy.clone());
            hub.policy_members.entry(w.policy.clone()).or_default().push(w.worker_id);
        }
    }
    let result = launch_and_route(&mut hub, descriptors, &addr, &rx);
    stop.store(true, Ordering::Relaxed);
    let _ = accept.join();
    match result {
        Ok(()) => {
            let teardown = hub.reap()?;
            let mut workers = std::mem::take(&mut hub.workers);
            workers.sort_by_key(|w| w.worker);
            let mut envs = std::mem::take(&mut hub.envs);
            envs.sort_by_key(|e| e.env_id);
            Ok(RoundOutcome { workers, envs, teardown })
        }
        Err(e) => {
            hub.kill_all();
            Err(e)
        }
    }
}

fn launch_and_route(hub: &mut Hub, descriptors: &[NodeDescriptor], addr: &str, rx: &mpsc::Receiver<Event>) -> Result<(), OrchestratorError> {
    for d in descriptors {
        let log = File::create(log_path(&hub.opts.log_dir, d.node)).map_err(io_err)?;
        let mut child = Command::new(&hub.opts.node_bin)
            .args(["node", "--hub", addr])
            .stdin(Stdio::piped())
            .stdout(Stdio::null())
            .stderr(log)
            .spawn()
            .map_err(|e| OrchestratorError::NodeCrash { node: d.node.to_string(), diagnostic: format!("launch failed: {e}") })?;
        hub.pids.insert(d.node, child.id());
        let mut stdin = child.stdin.take().expect("stdin is piped");
        hub.registry.insert(d.node, child);
        stdin.write_all(&d.to_json()).map_err(io_err)?;
    }
    let n = descriptors.len();
    while hub.reported.len() < n {
        let event = rx.recv_timeout(hub.opts.timeout).map_err(|_| {
            let waiting: Vec<String> = descriptors.iter().map(|d| d.node).filter(|n| !hub.reported.contains(n)).map(|n| n.to_string()).collect();
            OrchestratorError::Timeout(format!("no progress; waiting on {}", waiting.join(", ")))
        })?;
        match event {
            Event::Hello(node, pid, writer) => {
                if hub.pids.get(&node) != Some(&pid) || hub.writers.contains_key(&node) {
                    return Err(OrchestratorError::ProtocolViolation(format!("unexpected hello from {node} (pid {pid})")));
                }
                hub.writers.insert(node, writer);
                if hub.writers.len() == n {
                    let nodes: Vec<NodeId> = hub.writers.keys().copied().collect();
                    for node in nodes {
                        hub.send(node, &FromHub::Start)?;
                    }
                }
            }
            Event::Msg(node, msg) => hub.handle(node, msg)?,
            Event::Closed(node, why) => {
                if !hub.reported.contains(&node) {
                    let tail = log_tail(&hub.opts.log_dir, node);
                    return Err(OrchestratorError::NodeCrash { node: node.to_string(), diagnostic: format!("{why}; log: {tail}") });
                }
            }
        }
    }
    Ok(())
}

struct Link {
    input: BufReader<TcpStream>,
    output: TcpStream,
}

impl Link {
    fn send(&mut self, msg: &ToHub) -> Result<(), OrchestratorError> {
        write_msg(&mut self.output, msg).map_err(io_err)
    }

    fn recv(&mut self) -> Result<FromHub, OrchestratorError> {
        read_msg(&mut self.input).map_err(|e| match e.kind() {
            std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => OrchestratorError::Timeout("hub silent".into()),
            _ => io_err(e),
        })
    }
}

/// Entry point of a node process: reads its descriptor from stdin and
/// serves until its part of the round is done.
pub fn node_main(hub_addr: &str) -> Result<(), OrchestratorError> {
    let mut raw = vec![];
    std::io::Read::read_to_end(&mut std::io::stdin(), &mut raw).map_err(io_err)?;
    let desc = NodeDescriptor::from_json(&raw).map_err(|e| OrchestratorError::ProtocolViolation(format!("bad descriptor: {e}")))?;
    let stream = TcpStream::connect(hub_addr).map_err(io_err)?;
    stream.set_nodelay(true).map_err(io_err)?;
    stream.set_read_timeout(desc.timeout_secs.map(Duration::from_secs_f64)).map_err(io_err)?;
    let mut link = Link { output: stream.try_clone().map_err(io_err)?, input: BufReader::new(stream) };
    link.send(&ToHub::Hello { node: desc.node, pid: std::process::id() })?;
    let result = match link.recv()? {
        FromHub::Start => match desc.role {
            Role::Env(ref e) => EnvServer::new(e.env_id, &e.env, e.members.clone(), desc.run_seed, desc.round, e.share)
                .and_then(|server| env_loop(server, &mut link)),
            Role::Worker(ref w) => {
                let t0 = Instant::now();
                WorkerCore::new(w.clone(), desc.round, Box::new(move |_| t0.elapsed().as_secs_f64())).and_then(|core| worker_loop(core, &mut link))
            }
        },
        other => Err(OrchestratorError::ProtocolViolation(format!("expected start, got {other:?}"))),
    };
    if let Err(e) = &result {
        let _ = link.send(&ToHub::Failed(e.to_string()));
    }
    result
}

fn send_replies(link: &mut Link, replies: Vec<super::server::WorkerReply>) -> Result<(), OrchestratorError> {
    for r in replies {
        link.send(&ToHub::Reply(ReplyMsg { worker: r.worker, frame: r.batch.to_frame(), stop: r.stop, tick: r.tick }))?;
    }
    Ok(())
}

fn env_loop(mut server: EnvServer, link: &mut Link) -> Result<(), OrchestratorError> {
    let replies = server.start()?;
    send_replies(link, replies)?;
    let members: Vec<usize> = server.members().iter().map(|(w, _)| *w).collect();
    while !server.is_stopped() {
        let mut pending: BTreeMap<usize, Vec<Value>> = BTreeMap::new();
        while pending.len() < members.len() {
            match link.recv() {
                Ok(FromHub::Actions { worker, actions }) => {
                    if pending.insert(worker, actions).is_some() {
                        return Err(OrchestratorError::ProtocolViolation(format!("two action messages from worker {worker}")));
                    }
                }
                Ok(other) => return Err(OrchestratorError::ProtocolViolation(format!("env got {other:?}"))),
                Err(OrchestratorError::Timeout(_)) => {
                    let missing = members.iter().find(|m| !pending.contains_key(m)).copied().unwrap_or_default();
                    return Err(OrchestratorError::MissingWorkerMessage(missing));
                }
                Err(e) => return Err(e),
            }
        }
        let replies = server.serve(&pending)?;
        send_replies(link, replies)?;
    }
    link.send(&ToHub::Env(EnvReport { env_id: server.env_id(), steps: server.steps(), episodes: server.episodes() }))
}

fn worker_loop(mut core: WorkerCore, link: &mut Link) -> Result<(), OrchestratorError> {
    loop {
        let reply = match link.recv()? {
            FromHub::Reply(r) => r,
            other => return Err(OrchestratorError::ProtocolViolation(format!("worker expected a reply, got {other:?}"))),
        };
        core.receive(StepBatch::from_frame(&reply.frame)?, reply.stop, reply.tick)?;
        while core.wants_update() {
            let phases = core.begin_update();
            for p in 0..phases {
                let (seq, grad) = core.gradient(p);
                link.send(&ToHub::Grad { seq, grad })?;
                match link.recv()? {
                    FromHub::Mean { seq: s, values } if s == seq => core.apply(p, &values),
                    other => return Err(OrchestratorError::ProtocolViolation(format!("expected mean {seq}, got {other:?}"))),
                }
            }
            core.end_update();
        }
        if core.is_stopping() {
            link.send(&ToHub::Leave { policy: core.policy().to_string(), count: core.collectives() })?;
            return link.send(&ToHub::Worker(core.into_report()));
        }
        let actions = core.act()?;
        link.send(&ToHub::Actions { env: core.env_id(), worker: core.id(), actions })?;
    }
}
