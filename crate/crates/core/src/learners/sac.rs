//! Soft actor-critic with twin critics, target networks and a fixed entropy
//! temperature.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::adam::{polyak, Adam};
use super::checkpoint::{Checkpoint, CheckpointError};
use super::dist::{deterministic_action, gaussian_policy_sample, normal_noise, squashed_sample, ActionBounds};
use super::mlp::Mlp;
use super::replay::{Batch, ReplayBuffer};
use super::{box_bounds, Agent, Algorithm, Experience, HyperParams, LearnerError, UpdateStats};
use crate::interface::{EntitySpec, Value};
use crate::seed::ArenaRng;

pub fn hcat(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    concatenate![Axis(1), a, b]
}

/// Soft clipped double-Q target `r + gamma (1 - d) (min Q'(s', a') - alpha log pi(a'|s'))`
/// given the next actions' log-probabilities.
pub fn soft_target(
    q1_targ: &Mlp,
    q2_targ: &Mlp,
    batch: &Batch,
    next_actions: ArrayView2<f64>,
    next_log_prob: &Array1<f64>,
    gamma: f64,
    alpha: f64,
) -> Array1<f64> {
    let x = hcat(batch.next_obs.view(), next_actions);
    let c1 = q1_targ.forward_batch(x.view());
    let c2 = q2_targ.forward_batch(x.view());
    let (c1, c2) = (c1.output(), c2.output());
    Array1::from_shape_fn(batch.len(), |b| {
        let soft = c1[[b, 0]].min(c2[[b, 0]]) - alpha * next_log_prob[b];
        batch.reward[b] + gamma * (1.0 - batch.terminal[b]) * soft
    })
}

/// SAC critic target for a replay batch, sampling next actions with `noise`.
pub fn critic_target(
    actor: &Mlp,
    q1_targ: &Mlp,
    q2_targ: &Mlp,
    bounds: &ActionBounds,
    batch: &Batch,
    noise: ArrayView2<f64>,
    gamma: f64,
    alpha: f64,
) -> Array1<f64> {
    let out = actor.forward_batch(batch.next_obs.view());
    let sq = squashed_sample(out.output().view(), bounds, noise);
    soft_target(q1_targ, q2_targ, batch, sq.actions.view(), &sq.log_prob, gamma, alpha)
}

/// `mean (Q1(x) - y)^2 + mean (Q2(x) - y)^2` and its gradient over `[q1 | q2]` parameters.
pub fn critic_loss_grad(q1: &Mlp, q2: &Mlp, x: ArrayView2<f64>, y: &Array1<f64>) -> (f64, Vec<f64>) {
    let n = y.len() as f64;
    let n1 = q1.param_count();
    let mut grad = vec![0.0; n1 + q2.param_count()];
    let mut loss = 0.0;
    for (net, g) in [(q1, 0..n1), (q2, n1..grad.len())] {
        let cache = net.forward_batch(x);
        let q = cache.output().column(0);
        let diff = &q - y;
        loss += diff.iter().map(|d| d * d).sum::<f64>() / n;
        let up = (diff * (2.0 / n)).insert_axis(Axis(1));
        net.backward(&cache, up.view(), Some(&mut grad[g]), false);
    }
    (loss, grad)
}

/// Upstream gradients of `-mean min(c1, c2)` with respect to each critic's output.
pub fn min_q_upstream(c1: &Array2<f64>, c2: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let n = c1.nrows();
    let w = -1.0 / n as f64;
    let mut u1 = Array2::zeros((n, 1));
    let mut u2 = Array2::zeros((n, 1));
    let mut min_q = Array1::zeros(n);
    for b in 0..n {
        if c1[[b, 0]] <= c2[[b, 0]] {
            u1[[b, 0]] = w;
            min_q[b] = c1[[b, 0]];
        } else {
            u2[[b, 0]] = w;
            min_q[b] = c2[[b, 0]];
        }
    }
    (u1, u2, min_q)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActorLoss {
    pub loss: f64,
    pub entropy: f64,
}

/// `mean(alpha log pi(a|s) - min Q(s, a))` with reparameterised `a`, and its
/// gradient over the actor's parameters. Critics are held fixed.
pub fn actor_loss_grad(
    actor: &Mlp,
    q1: &Mlp,
    q2: &Mlp,
    bounds: &ActionBounds,
    obs: ArrayView2<f64>,
    noise: ArrayView2<f64>,
    alpha: f64,
) -> (ActorLoss, Vec<f64>) {
    let n = obs.nrows() as f64;
    let obs_dim = obs.ncols();
    let out = actor.forward_batch(obs);
    let sq = squashed_sample(out.output().view(), bounds, noise);
    let x = hcat(obs, sq.actions.view());
    let k1 = q1.forward_batch(x.view());
    let k2 = q2.forward_batch(x.view());
    let (u1, u2, min_q) = min_q_upstream(k1.output(), k2.output());
    let dx1 = q1.backward(&k1, u1.view(), None, true).unwrap();
    let dx2 = q2.backward(&k2, u2.view(), None, true).unwrap();
    let d_action = &dx1.slice(s![.., obs_dim..]) + &dx2.slice(s![.., obs_dim..]);
    let d_logp = Array1::from_elem(obs.nrows(), alpha / n);
    let d_out = sq.backward(bounds, d_action.view(), &d_logp);
    let mut grad = vec![0.0; actor.param_count()];
    actor.backward(&out, d_out.view(), Some(&mut grad), false);
    let loss = (0..obs.nrows()).map(|b| alpha * sq.log_prob[b] - min_q[b]).sum::<f64>() / n;
    let entropy = -sq.log_prob.sum() / n;
    (ActorLoss { loss, entropy }, grad)
}

struct Pending {
    batch: Batch,
    noise_next: Array2<f64>,
    noise_pi: Array2<f64>,
    stats: UpdateStats,
}

/// Single-agent SAC over flat feature vectors.
pub struct SacLearner {
    policy: String,
    tag: &'static str,
    pub hyper: HyperParams,
    pub bounds: ActionBounds,
    pub actor: Mlp,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_targ: Mlp,
    pub q2_targ: Mlp,
    actor_opt: Adam,
    q1_opt: Adam,
    q2_opt: Adam,
    pub replay: ReplayBuffer,
    obs_dim: usize,
    env_steps: u64,
    since_update: u64,
    owed: u64,
    version: u64,
    frozen: bool,
    pending: Option<Pending>,
}

impl SacLearner {
    pub fn new(policy: &str, hyper: HyperParams, spec: &EntitySpec, rng: &mut ArenaRng) -> Result<Self, LearnerError> {
        let bounds = box_bounds(&[&spec.act_space], "sac")?;
        Ok(Self::with_dims(policy, Algorithm::Sac.tag(), hyper, spec.obs_space.flat_dim(), bounds, rng))
    }

    pub fn with_dims(
        policy: &str,
        tag: &'static str,
        hyper: HyperParams,
        obs_dim: usize,
        bounds: ActionBounds,
        rng: &mut ArenaRng,
    ) -> Self {
        let act_dim = bounds.dim();
        let actor_sizes: Vec<usize> =
            [obs_dim].into_iter().chain(hyper.actor_hidden.iter().copied()).chain([2 * act_dim]).collect();
        let critic_sizes: Vec<usize> =
            [obs_dim + act_dim].into_iter().chain(hyper.critic_hidden.iter().copied()).chain([1]).collect();
        let actor = Mlp::init(&actor_sizes, rng).expect("actor sizes");
        let q1 = Mlp::init(&critic_sizes, rng).expect("critic sizes");
        let q2 = Mlp::init(&critic_sizes, rng).expect("critic sizes");
        SacLearner {
            policy: policy.into(),
            tag,
            actor_opt: Adam::new(actor.param_count(), hyper.lr),
            q1_opt: Adam::new(q1.param_count(), hyper.lr),
            q2_opt: Adam::new(q2.param_count(), hyper.lr),
            replay: ReplayBuffer::new(obs_dim, act_dim, hyper.replay_capacity),
            q1_targ: q1.clone(),
            q2_targ: q2.clone(),
            actor,
            q1,
            q2,
            hyper,
            bounds,
            obs_dim,
            env_steps: 0,
            since_update: 0,
            owed: 0,
            version: 0,
            frozen: false,
            pending: None,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        [&self.actor, &self.q1, &self.q2, &self.q1_targ, &self.q2_targ].iter().map(|n| n.sizes().to_vec()).collect()
    }

    pub fn restore(&mut self, ckpt: &Checkpoint, algorithm: Algorithm) -> Result<(), CheckpointError> {
        let shapes = self.shapes();
        let parts = ckpt.unpack(algorithm.tag(), &shapes)?;
        for (net, p) in [&mut self.actor, &mut self.q1, &mut self.q2, &mut self.q1_targ, &mut self.q2_targ].into_iter().zip(parts) {
            net.params.copy_from_slice(p);
        }
        self.version = ckpt.step;
        Ok(())
    }

    pub fn snapshot(&self) -> Checkpoint {
        Checkpoint::from_parts(
            &self.policy,
            self.tag,
            self.version,
            &[&self.actor, &self.q1, &self.q2, &self.q1_targ, &self.q2_targ],
            &[],
        )
    }

    fn warming_up(&self) -> bool {
        self.version == 0 && self.env_steps < self.hyper.warmup
    }

    /// Action for one feature vector, or `None` while warming up.
    pub fn act_features(&self, obs: &[f64], rng: &mut ArenaRng) -> Option<Vec<f64>> {
        if self.frozen {
            return Some(deterministic_action(&self.actor.forward(obs).expect("obs width"), &self.bounds));
        }
        if self.warming_up() {
            return None;
        }
        let out = self.actor.forward(obs).expect("obs width");
        let (a, _) = gaussian_policy_sample(&out, &self.bounds, rng);
        Some(a.iter().enumerate().map(|(j, x)| x.clamp(self.bounds.low[j], self.bounds.high[j])).collect())
    }

    /// Uniform random action within the bounds, used during warmup.
    pub fn random_action(&self, rng: &mut ArenaRng) -> Vec<f64> {
        (0..self.bounds.dim()).map(|j| rng.random_range(self.bounds.low[j]..=self.bounds.high[j])).collect()
    }

    pub fn observe_features(&mut self, obs: &[f64], act: &[f64], reward: f64, next_obs: &[f64], terminal: bool) {
        if self.frozen {
            return;
        }
        self.replay.push(obs, act, reward, next_obs, terminal);
        self.env_steps += 1;
        self.since_update += 1;
        if self.since_update >= self.hyper.update_every {
            self.since_update = 0;
            if self.replay.len() >= self.hyper.batch_size && !self.warming_up() {
                self.owed += self.hyper.gradient_steps;
            }
        }
    }

    fn begin(&mut self, rng: &mut ArenaRng) -> usize {
        let b = self.hyper.batch_size;
        let a = self.bounds.dim();
        let batch = self.replay.sample(b, rng);
        let noise_next = normal_noise(b, a, rng);
        let noise_pi = normal_noise(b, a, rng);
        self.pending = Some(Pending { batch, noise_next, noise_pi, stats: UpdateStats::default() });
        2
    }

    fn gradient(&mut self, phase: usize) -> Vec<f64> {
        let p = self.pending.as_mut().expect("update not begun");
        if phase == 0 {
            let y = critic_target(
                &self.actor,
                &self.q1_targ,
                &self.q2_targ,
                &self.bounds,
                &p.batch,
                p.noise_next.view(),
                self.hyper.gamma,
                self.hyper.alpha,
            );
            let x = hcat(p.batch.obs.view(), p.batch.act.view());
            let (loss, g) = critic_loss_grad(&self.q1, &self.q2, x.view(), &y);
            p.stats.loss_value = loss;
            g
        } else {
            let (l, g) = actor_loss_grad(
                &self.actor,
                &self.q1,
                &self.q2,
                &self.bounds,
                p.batch.obs.view(),
                p.noise_pi.view(),
                self.hyper.alpha,
            );
            p.stats.loss_policy = l.loss;
            p.stats.entropy = l.entropy;
            g
        }
    }

    fn apply(&mut self, phase: usize, g: &[f64]) {
        if phase == 0 {
            let n1 = self.q1.param_count();
            self.q1_opt.step(&mut self.q1.params, &g[..n1]);
            self.q2_opt.step(&mut self.q2.params, &g[n1..]);
        } else {
            self.actor_opt.step(&mut self.actor.params, g);
        }
    }

    fn end(&mut self) -> UpdateStats {
        polyak(&mut self.q1_targ.params, &self.q1.params, self.hyper.tau);
        polyak(&mut self.q2_targ.params, &self.q2.params, self.hyper.tau);
        self.version += 1;
        self.owed = self.owed.saturating_sub(1);
        self.pending.take().map(|p| p.stats).unwrap_or_default()
    }
}

impl Agent for SacLearner {
    fn act(&mut self, obs: &[Value], rng: &mut ArenaRng) -> Vec<Value> {
        let x = obs[0].to_features(self.obs_dim);
        let a = self.act_features(&x, rng).unwrap_or_else(|| self.random_action(rng));
        vec![Value::Real(a)]
    }

    fn observe(&mut self, exp: &Experience) {
        let a = exp.actions[0].to_features(self.bounds.dim());
        let o = exp.obs[0].to_features(self.obs_dim);
        let n = exp.next_obs[0].to_features(self.obs_dim);
        self.observe_features(&o, &a, exp.rewards[0], &n, exp.terminal());
    }

    fn wants_update(&self) -> bool {
        self.owed > 0
    }

    fn begin_update(&mut self, rng: &mut ArenaRng) -> usize {
        self.begin(rng)
    }

    fn phase_gradient(&mut self, phase: usize) -> Vec<f64> {
        self.gradient(phase)
    }

    fn apply_phase(&mut self, phase: usize, mean_grad: &[f64]) {
        self.apply(phase, mean_grad)
    }

    fn end_update(&mut self) -> UpdateStats {
        self.end()
    }

    fn version(&self) -> u64 {
        self.version
    }

    fn checkpoint(&self) -> Option<Checkpoint> {
        (!self.frozen).then(|| self.snapshot())
    }
}
