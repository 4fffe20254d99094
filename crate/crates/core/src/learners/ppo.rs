//! PPO with a clipped surrogate, GAE advantages, value loss and entropy
//! bonus. Discrete spaces use a categorical head; box spaces a diagonal
//! Gaussian with a state-independent log standard deviation.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::adam::Adam;
use super::checkpoint::{Checkpoint, CheckpointError};
use super::dist::{categorical_entropy, gaussian_entropy, gaussian_log_prob, log_softmax, sample_categorical, ActionBounds};
use super::mlp::{rows_to_matrix, Mlp};
use super::{box_bounds, Agent, Algorithm, Experience, HyperParams, LearnerError, UpdateStats};
use crate::interface::{EntitySpec, SpaceSpec, Value};
use crate::seed::ArenaRng;

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyHead {
    Categorical { n: usize },
    Gaussian { bounds: ActionBounds },
}

impl PolicyHead {
    pub fn for_space(space: &SpaceSpec) -> Result<Self, LearnerError> {
        match space {
            SpaceSpec::Discrete { n } => Ok(PolicyHead::Categorical { n: *n as usize }),
            SpaceSpec::Box { .. } => Ok(PolicyHead::Gaussian { bounds: box_bounds(&[space], "ppo")? }),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            PolicyHead::Categorical { n } => *n,
            PolicyHead::Gaussian { bounds } => bounds.dim(),
        }
    }

    /// Width of a stored action row.
    pub fn act_dim(&self) -> usize {
        match self {
            PolicyHead::Categorical { .. } => 1,
            PolicyHead::Gaussian { bounds } => bounds.dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoNets {
    pub policy: Mlp,
    /// Empty for categorical heads.
    pub log_std: Vec<f64>,
    pub value: Mlp,
}

impl PpoNets {
    pub fn param_count(&self) -> usize {
        self.policy.param_count() + self.log_std.len() + self.value.param_count()
    }

    /// All parameters as `[policy | log_std | value]`.
    pub fn flat(&self) -> Vec<f64> {
        self.policy.params.iter().chain(&self.log_std).chain(&self.value.params).copied().collect()
    }

    pub fn set_flat(&mut self, p: &[f64]) {
        let (a, rest) = p.split_at(self.policy.param_count());
        let (b, c) = rest.split_at(self.log_std.len());
        self.policy.params.copy_from_slice(a);
        self.log_std.copy_from_slice(b);
        self.value.params.copy_from_slice(c);
    }
}

/// One minibatch of processed rollout data.
#[derive(Debug, Clone)]
pub struct Minibatch {
    pub obs: Array2<f64>,
    /// Discrete: one column holding the index. Gaussian: the raw sample.
    pub actions: Array2<f64>,
    pub log_prob_old: Array1<f64>,
    pub advantages: Array1<f64>,
    pub returns: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoCoefs {
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PpoLoss {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub total: f64,
}

/// Total loss `-mean min(rho A, clip(rho) A) + c_v mean (V - R)^2 - c_e mean H`
/// and its gradient over `[policy | log_std | value]`.
pub fn ppo_loss_grad(nets: &PpoNets, head: &PolicyHead, mb: &Minibatch, c: PpoCoefs) -> (PpoLoss, Vec<f64>) {
    let b = mb.obs.nrows();
    let n = b as f64;
    let pc = nets.policy.param_count();
    let mut grad = vec![0.0; nets.param_count()];
    let pcache = nets.policy.forward_batch(mb.obs.view());
    let out = pcache.output();
    let mut d_out = Array2::zeros(out.dim());
    let mut loss = PpoLoss::default();
    let mut d_log_std = vec![0.0; nets.log_std.len()];

    for i in 0..b {
        let row = out.row(i);
        let (logp, entropy) = match head {
            PolicyHead::Categorical { .. } => {
                let lsm = log_softmax(row.as_slice().unwrap());
                let a = mb.actions[[i, 0]] as usize;
                (lsm[a], categorical_entropy(&lsm))
            }
            PolicyHead::Gaussian { .. } => {
                let x = mb.actions.row(i).to_vec();
                (gaussian_log_prob(row.as_slice().unwrap(), &nets.log_std, &x), gaussian_entropy(&nets.log_std))
            }
        };
        let adv = mb.advantages[i];
        let ratio = (logp - mb.log_prob_old[i]).exp();
        let unclipped = ratio * adv;
        let clipped = ratio.clamp(1.0 - c.clip_eps, 1.0 + c.clip_eps) * adv;
        let surrogate = unclipped.min(clipped);
        loss.policy -= surrogate / n;
        loss.entropy += entropy / n;
        let d_logp = if unclipped <= clipped { -ratio * adv / n } else { 0.0 };
        let d_entropy = -c.entropy_coef / n;
        match head {
            PolicyHead::Categorical { .. } => {
                let lsm = log_softmax(row.as_slice().unwrap());
                let a = mb.actions[[i, 0]] as usize;
                for (k, lp) in lsm.iter().enumerate() {
                    let p = lp.exp();
                    let onehot = if k == a { 1.0 } else { 0.0 };
                    d_out[[i, k]] = d_logp * (onehot - p) + d_entropy * (-p * (lp + entropy));
                }
            }
            PolicyHead::Gaussian { .. } => {
                for j in 0..nets.log_std.len() {
                    let sigma = nets.log_std[j].exp();
                    let z = (mb.actions[[i, j]] - row[j]) / sigma;
                    d_out[[i, j]] = d_logp * z / sigma;
                    d_log_std[j] += d_logp * (z * z - 1.0) + d_entropy;
                }
            }
        }
    }
    nets.policy.backward(&pcache, d_out.view(), Some(&mut grad[..pc]), false);
    grad[pc..pc + d_log_std.len()].copy_from_slice(&d_log_std);

    let vcache = nets.value.forward_batch(mb.obs.view());
    let diff = &vcache.output().column(0) - &mb.returns;
    loss.value = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let up = (diff * (2.0 * c.value_coef / n)).insert_axis(Axis(1));
    let vo = pc + nets.log_std.len();
    nets.value.backward(&vcache, up.view(), Some(&mut grad[vo..]), false);
    loss.total = loss.policy + c.value_coef * loss.value - c.entropy_coef * loss.entropy;
    (loss, grad)
}

/// Generalised advantage estimates and value targets.
///
/// `terminal[t]` stops bootstrapping from `next_values[t]`; `ended[t]` stops
/// the advantage recursion (episode boundary, including truncation).
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    terminal: &[bool],
    ended: &[bool],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let t_len = rewards.len();
    let mut adv = vec![0.0; t_len];
    let mut running = 0.0;
    for t in (0..t_len).rev() {
        let boot = if terminal[t] { 0.0 } else { gamma * next_values[t] };
        let delta = rewards[t] + boot - values[t];
        if ended[t] {
            running = 0.0;
        }
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// On-policy rollout storage, cleared after every update.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryBuffer {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_obs: Vec<Vec<f64>>,
    pub terminal: Vec<bool>,
    pub ended: Vec<bool>,
}

impl TrajectoryBuffer {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn clear(&mut self) {
        *self = TrajectoryBuffer::default();
    }
}

struct Pending {
    data: Minibatch,
    chunks: Vec<Vec<usize>>,
    stats: UpdateStats,
}

pub struct PpoLearner {
    policy: String,
    pub hyper: HyperParams,
    pub head: PolicyHead,
    pub nets: PpoNets,
    opt: Adam,
    pub buffer: TrajectoryBuffer,
    obs_dim: usize,
    last_action: Option<(Vec<f64>, f64)>,
    version: u64,
    frozen: bool,
    pending: Option<Pending>,
}

impl PpoLearner {
    pub fn new(policy: &str, hyper: HyperParams, spec: &EntitySpec, rng: &mut ArenaRng) -> Result<Self, LearnerError> {
        let head = PolicyHead::for_space(&spec.act_space)?;
        let obs_dim = spec.obs_space.flat_dim();
        let psizes: Vec<usize> = [obs_dim].into_iter().chain(hyper.actor_hidden.iter().copied()).chain([head.out_dim()]).collect();
        let vsizes: Vec<usize> = [obs_dim].into_iter().chain(hyper.critic_hidden.iter().copied()).chain([1]).collect();
        let policy_net = Mlp::init(&psizes, rng).expect("policy sizes");
        let value = Mlp::init(&vsizes, rng).expect("value sizes");
        let log_std = match &head {
            PolicyHead::Categorical { .. } => vec![],
            PolicyHead::Gaussian { bounds } => vec![0.0; bounds.dim()],
        };
        let nets = PpoNets { policy: policy_net, log_std, value };
        Ok(PpoLearner {
            policy: policy.into(),
            opt: Adam::new(nets.param_count(), hyper.lr),
            hyper,
            head,
            nets,
            buffer: TrajectoryBuffer::default(),
            obs_dim,
            last_action: None,
            version: 0,
            frozen: false,
            pending: None,
        })
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn coefs(&self) -> PpoCoefs {
        PpoCoefs { clip_eps: self.hyper.clip_eps, value_coef: self.hyper.value_coef, entropy_coef: self.hyper.entropy_coef }
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        let mut s = vec![self.nets.policy.sizes().to_vec(), self.nets.value.sizes().to_vec()];
        if !self.nets.log_std.is_empty() {
            s.push(vec![self.nets.log_std.len()]);
        }
        s
    }

    pub fn snapshot(&self) -> Checkpoint {
        let extra: Vec<&[f64]> = if self.nets.log_std.is_empty() { vec![] } else { vec![&self.nets.log_std] };
        Checkpoint::from_parts(&self.policy, Algorithm::Ppo.tag(), self.version, &[&self.nets.policy, &self.nets.value], &extra)
    }

    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
        let shapes = self.shapes();
        let parts = ckpt.unpack(Algorithm::Ppo.tag(), &shapes)?;
        self.nets.policy.params.copy_from_slice(parts[0]);
        self.nets.value.params.copy_from_slice(parts[1]);
        if let Some(ls) = parts.get(2) {
            self.nets.log_std.copy_from_slice(ls);
        }
        self.version = ckpt.step;
        Ok(())
    }

    /// Samples a raw action and its log-probability, plus the env-facing value.
    fn sample(&self, obs: &[f64], rng: &mut ArenaRng) -> (Vec<f64>, f64, Value) {
        let out = self.nets.policy.forward(obs).expect("obs width");
        match &self.head {
            PolicyHead::Categorical { .. } => {
                let lsm = log_softmax(&out);
                let k = if self.frozen {
                    (0..lsm.len()).fold(0, |best, k| if lsm[k] > lsm[best] { k } else { best })
                } else {
                    sample_categorical(&lsm, rng)
                };
                (vec![k as f64], lsm[k], Value::Discrete(k as i64))
            }
            PolicyHead::Gaussian { bounds } => {
                let x: Vec<f64> = if self.frozen {
                    out.clone()
                } else {
                    out.iter()
                        .zip(&self.nets.log_std)
                        .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                };
                let lp = gaussian_log_prob(&out, &self.nets.log_std, &x);
                let env = x.iter().enumerate().map(|(j, v)| v.clamp(bounds.low[j], bounds.high[j])).collect();
                (x, lp, Value::Real(env))
            }
        }
    }

    fn values(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let m = rows_to_matrix(&refs);
        self.nets.value.forward_batch(m.view()).output().column(0).to_vec()
    }

    /// Builds the full processed batch from the rollout.
    pub fn process_buffer(&self) -> Minibatch {
        let buf = &self.buffer;
        let v = self.values(&buf.obs);
        let nv = self.values(&buf.next_obs);
        let (mut adv, ret) = gae(&buf.rewards, &v, &nv, &buf.terminal, &buf.ended, self.hyper.gamma, self.hyper.gae_lambda);
        let n = adv.len() as f64;
        let mean = adv.iter().sum::<f64>() / n;
        let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        adv.iter_mut().for_each(|a| *a = (*a - mean) / (std + 1e-8));
        let obs: Vec<&[f64]> = buf.obs.iter().map(Vec::as_slice).collect();
        let act: Vec<&[f64]> = buf.actions.iter().map(Vec::as_slice).collect();
        Minibatch {
            obs: rows_to_matrix(&obs),
            actions: rows_to_matrix(&act),
            log_prob_old: Array1::from(buf.log_probs.clone()),
            advantages: Array1::from(adv),
            returns: Array1::from(ret),
        }
    }
}

pub fn select_rows(mb: &Minibatch, idx: &[usize]) -> Minibatch {
    let pick = |a: &Array2<f64>| a.select(Axis(0), idx);
    let pick1 = |a: &Array1<f64>| a.select(Axis(0), idx);
    Minibatch {
        obs: pick(&mb.obs),
        actions: pick(&mb.actions),
        log_prob_old: pick1(&mb.log_prob_old),
        advantages: pick1(&mb.advantages),
        returns: pick1(&mb.returns),
    }
}

impl Agent for PpoLearner {
    fn act(&mut self, obs: &[Value], rng: &mut ArenaRng) -> Vec<Value> {
        let x = obs[0].to_features(self.obs_dim);
        let (raw, lp, env) = self.sample(&x, rng);
        self.last_action = Some((raw, lp));
        vec![env]
    }

    fn observe(&mut self, exp: &Experience) {
        if self.frozen {
            return;
        }
        let (raw, lp) = self.last_action.take().expect("observe without act");
        let b = &mut self.buffer;
        b.obs.push(exp.obs[0].to_features(self.obs_dim));
        b.actions.push(raw);
        b.log_probs.push(lp);
        b.rewards.push(exp.rewards[0]);
        b.next_obs.push(exp.next_obs[0].to_features(self.obs_dim));
        b.terminal.push(exp.terminal());
        b.ended.push(exp.done);
    }

    fn wants_update(&self) -> bool {
        !self.frozen && self.buffer.len() >= self.hyper.ppo_horizon
    }

    fn begin_update(&mut self, rng: &mut ArenaRng) -> usize {
        let data = self.process_buffer();
        let n = data.obs.nrows();
        let mut chunks = Vec::new();
        let mut idx: Vec<usize> = (0..n).collect();
        for _ in 0..self.hyper.ppo_epochs {
            idx.shuffle(rng);
            chunks.extend(idx.chunks(self.hyper.ppo_minibatch).map(<[usize]>::to_vec));
        }
        let phases = chunks.len();
        self.pending = Some(Pending { data, chunks, stats: UpdateStats::default() });
        phases
    }

    fn phase_gradient(&mut self, phase: usize) -> Vec<f64> {
        let coefs = self.coefs();
        let p = self.pending.as_mut().expect("update not begun");
        let mb = select_rows(&p.data, &p.chunks[phase]);
        let (loss, g) = ppo_loss_grad(&self.nets, &self.head, &mb, coefs);
        let k = p.chunks.len() as f64;
        p.stats.loss_policy += loss.policy / k;
        p.stats.loss_value += loss.value / k;
        p.stats.entropy += loss.entropy / k;
        g
    }

    fn apply_phase(&mut self, _phase: usize, mean_grad: &[f64]) {
        let mut flat = self.nets.flat();
        self.opt.step(&mut flat, mean_grad);
        self.nets.set_flat(&flat);
    }

    fn end_update(&mut self) -> UpdateStats {
        self.buffer.clear();
        self.version += 1;
        self.pending.take().map(|p| p.stats).unwrap_or_default()
    }

    fn version(&self) -> u64 {
        self.version
    }

    fn checkpoint(&self) -> Option<Checkpoint> {
        (!self.frozen).then(|| self.snapshot())
    }
}

/// Random minibatch for gradient checks: observations, actions drawn from
/// the head's space, and perturbed old log-probabilities so that both
/// surrogate branches are exercised.
pub fn random_minibatch(nets: &PpoNets, head: &PolicyHead, n: usize, rng: &mut ArenaRng) -> Minibatch {
    let d = nets.policy.input_dim();
    let obs = Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0));
    let actions = match head {
        PolicyHead::Categorical { n: k } => Array2::from_shape_simple_fn((n, 1), || rng.random_range(0..*k) as f64),
        PolicyHead::Gaussian { bounds } => Array2::from_shape_simple_fn((n, bounds.dim()), || rng.random_range(-1.5..1.5)),
    };
    let out = nets.policy.forward_batch(obs.view());
    let log_prob_old = Array1::from_shape_fn(n, |i| {
        let row = out.output().row(i).to_vec();
        let lp = match head {
            PolicyHead::Categorical { .. } => log_softmax(&row)[actions[[i, 0]] as usize],
            PolicyHead::Gaussian { .. } => gaussian_log_prob(&row, &nets.log_std, &actions.row(i).to_vec()),
        };
        lp + rng.random_range(-0.5..0.5)
    });
    Minibatch {
        obs,
        actions,
        log_prob_old,
        advantages: Array1::from_shape_simple_fn(n, || rng.random_range(-2.0..2.0)),
        returns: Array1::from_shape_simple_fn(n, || rng.random_range(-3.0..3.0)),
    }
}
