//! Multi-agent SAC: one actor per grouped entity and a common twin critic
//! over the joint observation and joint action.

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng;

use super::adam::{polyak, Adam};
use super::checkpoint::{Checkpoint, CheckpointError};
use super::dist::{deterministic_action, normal_noise, squashed_sample, ActionBounds, SquashedBatch};
use super::mlp::{Mlp, MlpCache};
use super::replay::{Batch, ReplayBuffer};
use super::sac::{critic_loss_grad, hcat, min_q_upstream, soft_target, ActorLoss};
use super::{box_bounds, Agent, Algorithm, Experience, HyperParams, LearnerError, UpdateStats};
use crate::interface::{EntitySpec, Value};
use crate::seed::ArenaRng;

/// Column layout of the joint observation and action.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLayout {
    pub obs_dims: Vec<usize>,
    pub bounds: Vec<ActionBounds>,
}

impl JointLayout {
    pub fn agents(&self) -> usize {
        self.obs_dims.len()
    }

    pub fn obs_total(&self) -> usize {
        self.obs_dims.iter().sum()
    }

    pub fn act_total(&self) -> usize {
        self.bounds.iter().map(ActionBounds::dim).sum()
    }

    fn obs_offsets(&self) -> Vec<usize> {
        offsets(self.obs_dims.iter().copied())
    }

    fn act_offsets(&self) -> Vec<usize> {
        offsets(self.bounds.iter().map(ActionBounds::dim))
    }
}

fn offsets(dims: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut acc = 0;
    dims.map(|d| {
        let o = acc;
        acc += d;
        o
    })
    .collect()
}

/// Samples every agent's action for the joint observation `obs` with the
/// joint `noise`; returns per-agent caches and samples plus the joint action
/// and the per-sample sum of log-probabilities.
fn joint_sample(
    actors: &[Mlp],
    layout: &JointLayout,
    obs: ArrayView2<f64>,
    noise: ArrayView2<f64>,
) -> (Vec<MlpCache>, Vec<SquashedBatch>, Array2<f64>, Array1<f64>) {
    let n = obs.nrows();
    let (oo, ao) = (layout.obs_offsets(), layout.act_offsets());
    let mut caches = Vec::with_capacity(actors.len());
    let mut samples = Vec::with_capacity(actors.len());
    let mut joint = Array2::zeros((n, layout.act_total()));
    for (i, actor) in actors.iter().enumerate() {
        let (od, ad) = (layout.obs_dims[i], layout.bounds[i].dim());
        let cache = actor.forward_batch(obs.slice(s![.., oo[i]..oo[i] + od]));
        let sq = squashed_sample(cache.output().view(), &layout.bounds[i], noise.slice(s![.., ao[i]..ao[i] + ad]));
        joint.slice_mut(s![.., ao[i]..ao[i] + ad]).assign(&sq.actions);
        caches.push(cache);
        samples.push(sq);
    }
    let log_prob = Array1::from_shape_fn(n, |b| samples[1..].iter().fold(samples[0].log_prob[b], |acc, sq| acc + sq.log_prob[b]));
    (caches, samples, joint, log_prob)
}

/// Common-critic target with the entropy of all agents' next actions summed
/// under one temperature.
#[allow(clippy::too_many_arguments)]
pub fn joint_critic_target(
    actors: &[Mlp],
    q1_targ: &Mlp,
    q2_targ: &Mlp,
    layout: &JointLayout,
    batch: &Batch,
    noise: ArrayView2<f64>,
    gamma: f64,
    alpha: f64,
) -> Array1<f64> {
    let (_, _, joint, log_prob) = joint_sample(actors, layout, batch.next_obs.view(), noise);
    soft_target(q1_targ, q2_targ, batch, joint.view(), &log_prob, gamma, alpha)
}

/// Joint actor loss `mean(alpha sum_i log pi_i - min Q(o, a_1..a_M))` with
/// every agent's action freshly sampled, and its gradient over all actor
/// parameters concatenated in agent order.
pub fn joint_actor_loss_grad(
    actors: &[Mlp],
    q1: &Mlp,
    q2: &Mlp,
    layout: &JointLayout,
    obs: ArrayView2<f64>,
    noise: ArrayView2<f64>,
    alpha: f64,
) -> (ActorLoss, Vec<f64>) {
    let n = obs.nrows() as f64;
    let obs_dim = obs.ncols();
    let (caches, samples, joint, log_prob) = joint_sample(actors, layout, obs, noise);
    let x = hcat(obs, joint.view());
    let k1 = q1.forward_batch(x.view());
    let k2 = q2.forward_batch(x.view());
    let (u1, u2, min_q) = min_q_upstream(k1.output(), k2.output());
    let dx1 = q1.backward(&k1, u1.view(), None, true).unwrap();
    let dx2 = q2.backward(&k2, u2.view(), None, true).unwrap();
    let d_joint = &dx1.slice(s![.., obs_dim..]) + &dx2.slice(s![.., obs_dim..]);
    let d_logp = Array1::from_elem(obs.nrows(), alpha / n);
    let total: usize = actors.iter().map(Mlp::param_count).sum();
    let mut grad = vec![0.0; total];
    let ao = layout.act_offsets();
    let mut po = 0;
    for (i, actor) in actors.iter().enumerate() {
        let ad = layout.bounds[i].dim();
        let d_out = samples[i].backward(&layout.bounds[i], d_joint.slice(s![.., ao[i]..ao[i] + ad]), &d_logp);
        let pc = actor.param_count();
        actor.backward(&caches[i], d_out.view(), Some(&mut grad[po..po + pc]), false);
        po += pc;
    }
    let loss = (0..obs.nrows()).map(|b| alpha * log_prob[b] - min_q[b]).sum::<f64>() / n;
    let entropy = -log_prob.sum() / n;
    (ActorLoss { loss, entropy }, grad)
}

/// Shared reward of the group: the mean of the entities' rewards.
pub fn shared_reward(rewards: &[f64]) -> f64 {
    rewards[1..].iter().fold(rewards[0], |acc, r| acc + r) / rewards.len() as f64
}

struct Pending {
    batch: Batch,
    noise_next: Array2<f64>,
    noise_pi: Array2<f64>,
    stats: UpdateStats,
}

pub struct MasacLearner {
    policy: String,
    pub hyper: HyperParams,
    pub layout: JointLayout,
    pub actors: Vec<Mlp>,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_targ: Mlp,
    pub q2_targ: Mlp,
    actor_opts: Vec<Adam>,
    q1_opt: Adam,
    q2_opt: Adam,
    pub replay: ReplayBuffer,
    env_steps: u64,
    since_update: u64,
    owed: u64,
    version: u64,
    frozen: bool,
    pending: Option<Pending>,
}

impl MasacLearner {
    pub fn new(policy: &str, hyper: HyperParams, specs: &[EntitySpec], rng: &mut ArenaRng) -> Result<Self, LearnerError> {
        if specs.is_empty() {
            return Err(LearnerError::NotGrouped);
        }
        let bounds = specs.iter().map(|s| box_bounds(&[&s.act_space], "masac")).collect::<Result<Vec<_>, _>>()?;
        let layout = JointLayout { obs_dims: specs.iter().map(|s| s.obs_space.flat_dim()).collect(), bounds };
        Ok(Self::with_layout(policy, hyper, layout, rng))
    }

    pub fn with_layout(policy: &str, hyper: HyperParams, layout: JointLayout, rng: &mut ArenaRng) -> Self {
        let actors: Vec<Mlp> = (0..layout.agents())
            .map(|i| {
                let sizes: Vec<usize> = [layout.obs_dims[i]]
                    .into_iter()
                    .chain(hyper.actor_hidden.iter().copied())
                    .chain([2 * layout.bounds[i].dim()])
                    .collect();
                Mlp::init(&sizes, rng).expect("actor sizes")
            })
            .collect();
        let critic_sizes: Vec<usize> = [layout.obs_total() + layout.act_total()]
            .into_iter()
            .chain(hyper.critic_hidden.iter().copied())
            .chain([1])
            .collect();
        let q1 = Mlp::init(&critic_sizes, rng).expect("critic sizes");
        let q2 = Mlp::init(&critic_sizes, rng).expect("critic sizes");
        MasacLearner {
            policy: policy.into(),
            actor_opts: actors.iter().map(|a| Adam::new(a.param_count(), hyper.lr)).collect(),
            q1_opt: Adam::new(q1.param_count(), hyper.lr),
            q2_opt: Adam::new(q2.param_count(), hyper.lr),
            replay: ReplayBuffer::new(layout.obs_total(), layout.act_total(), hyper.replay_capacity),
            q1_targ: q1.clone(),
            q2_targ: q2.clone(),
            actors,
            q1,
            q2,
            hyper,
            layout,
            env_steps: 0,
            since_update: 0,
            owed: 0,
            version: 0,
            frozen: false,
            pending: None,
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    fn nets(&self) -> Vec<&Mlp> {
        self.actors.iter().chain([&self.q1, &self.q2, &self.q1_targ, &self.q2_targ]).collect()
    }

    pub fn snapshot(&self) -> Checkpoint {
        Checkpoint::from_parts(&self.policy, Algorithm::Masac.tag(), self.version, &self.nets(), &[])
    }

    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
        let shapes: Vec<Vec<usize>> = self.nets().iter().map(|n| n.sizes().to_vec()).collect();
        let parts: Vec<Vec<f64>> = ckpt.unpack(Algorithm::Masac.tag(), &shapes)?.into_iter().map(<[f64]>::to_vec).collect();
        let nets = self.actors.iter_mut().chain([&mut self.q1, &mut self.q2, &mut self.q1_targ, &mut self.q2_targ]);
        for (net, p) in nets.zip(parts) {
            net.params = p;
        }
        self.version = ckpt.step;
        Ok(())
    }

    fn warming_up(&self) -> bool {
        self.version == 0 && self.env_steps < self.hyper.warmup
    }

    /// Joint action for per-agent feature vectors.
    pub fn act_features(&self, obs: &[Vec<f64>], rng: &mut ArenaRng) -> Vec<Vec<f64>> {
        self.layout
            .bounds
            .iter()
            .enumerate()
            .map(|(i, b)| {
                if self.frozen {
                    return deterministic_action(&self.actors[i].forward(&obs[i]).expect("obs width"), b);
                }
                if self.warming_up() {
                    return (0..b.dim()).map(|j| rng.random_range(b.low[j]..=b.high[j])).collect();
                }
                let out = self.actors[i].forward(&obs[i]).expect("obs width");
                let (a, _) = super::dist::gaussian_policy_sample(&out, b, rng);
                a.iter().enumerate().map(|(j, x)| x.clamp(b.low[j], b.high[j])).collect()
            })
            .collect()
    }

    pub fn observe_joint(&mut self, obs: &[f64], act: &[f64], reward: f64, next_obs: &[f64], terminal: bool) {
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

    fn joint(&self, values: &[Value]) -> Vec<f64> {
        values.iter().zip(&self.layout.obs_dims).flat_map(|(v, d)| v.to_features(*d)).collect()
    }
}

impl Agent for MasacLearner {
    fn act(&mut self, obs: &[Value], rng: &mut ArenaRng) -> Vec<Value> {
        let per: Vec<Vec<f64>> = obs.iter().zip(&self.layout.obs_dims).map(|(v, d)| v.to_features(*d)).collect();
        self.act_features(&per, rng).into_iter().map(Value::Real).collect()
    }

    fn observe(&mut self, exp: &Experience) {
        let o = self.joint(exp.obs);
        let n = self.joint(exp.next_obs);
        let a: Vec<f64> = exp.actions.iter().zip(&self.layout.bounds).flat_map(|(v, b)| v.to_features(b.dim())).collect();
        self.observe_joint(&o, &a, shared_reward(exp.rewards), &n, exp.terminal());
    }

    fn wants_update(&self) -> bool {
        self.owed > 0
    }

    fn begin_update(&mut self, rng: &mut ArenaRng) -> usize {
        let b = self.hyper.batch_size;
        let a = self.layout.act_total();
        let batch = self.replay.sample(b, rng);
        let noise_next = normal_noise(b, a, rng);
        let noise_pi = normal_noise(b, a, rng);
        self.pending = Some(Pending { batch, noise_next, noise_pi, stats: UpdateStats::default() });
        2
    }

    fn phase_gradient(&mut self, phase: usize) -> Vec<f64> {
        let p = self.pending.as_mut().expect("update not begun");
        if phase == 0 {
            let y = joint_critic_target(
                &self.actors,
                &self.q1_targ,
                &self.q2_targ,
                &self.layout,
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
            let (l, g) = joint_actor_loss_grad(
                &self.actors,
                &self.q1,
                &self.q2,
                &self.layout,
                p.batch.obs.view(),
                p.noise_pi.view(),
                self.hyper.alpha,
            );
            p.stats.loss_policy = l.loss;
            p.stats.entropy = l.entropy;
            g
        }
    }

    fn apply_phase(&mut self, phase: usize, g: &[f64]) {
        if phase == 0 {
            let n1 = self.q1.param_count();
            self.q1_opt.step(&mut self.q1.params, &g[..n1]);
            self.q2_opt.step(&mut self.q2.params, &g[n1..]);
        } else {
            let mut off = 0;
            for (actor, opt) in self.actors.iter_mut().zip(&mut self.actor_opts) {
                let n = actor.param_count();
                opt.step(&mut actor.params, &g[off..off + n]);
                off += n;
            }
        }
    }

    fn end_update(&mut self) -> UpdateStats {
        polyak(&mut self.q1_targ.params, &self.q1.params, self.hyper.tau);
        polyak(&mut self.q2_targ.params, &self.q2.params, self.hyper.tau);
        self.version += 1;
        self.owed = self.owed.saturating_sub(1);
        self.pending.take().map(|p| p.stats).unwrap_or_default()
    }

    fn version(&self) -> u64 {
        self.version
    }

    fn checkpoint(&self) -> Option<Checkpoint> {
        (!self.frozen).then(|| self.snapshot())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::CoopNavConfig;
    use crate::learners::sac::SacLearner;
    use crate::learners::update_solo;
    use crate::seed;

    fn small() -> HyperParams {
        HyperParams { actor_hidden: vec![8], critic_hidden: vec![10], batch_size: 5, warmup: 3, ..Default::default() }
    }

    #[test]
    fn single_agent_matches_sac_bit_for_bit() {
        let spec = EntitySpec {
            entity_id: 0,
            obs_space: crate::interface::SpaceSpec::boxed(&[3], -9.0, 9.0),
            act_space: crate::interface::SpaceSpec::boxed(&[2], -1.0, 1.0),
        };
        let mut sac = SacLearner::new("p", small(), &spec, &mut seed::rng(&[1])).unwrap();
        let mut masac = MasacLearner::new("p", small(), &[spec], &mut seed::rng(&[1])).unwrap();
        let (mut r1, mut r2) = (seed::rng(&[2]), seed::rng(&[2]));
        let mut obs = vec![Value::Real(vec![0.1, 0.2, 0.3])];
        for t in 0..30 {
            let a1 = sac.act(&obs, &mut r1);
            let a2 = masac.act(&obs, &mut r2);
            assert!(a1[0].bit_eq(&a2[0]), "actions diverged at {t}");
            let next = vec![Value::Real(vec![t as f64 * 0.05, a1[0].numeric(), -0.3])];
            let exp = Experience { obs: &obs, actions: &a1, rewards: &[a1[0].numeric()], next_obs: &next, done: false, truncated: false };
            sac.observe(&exp);
            masac.observe(&exp);
            update_solo(&mut sac, &mut r1);
            update_solo(&mut masac, &mut r2);
            obs = next;
        }
        assert!(sac.version() > 20);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&sac.actor.params), bits(&masac.actors[0].params));
        assert_eq!(bits(&sac.q1.params), bits(&masac.q1.params));
        assert_eq!(bits(&sac.q2_targ.params), bits(&masac.q2_targ.params));
    }

    #[test]
    fn shared_reward_gives_one_target_for_all_actors() {
        // With equal per-entity rewards the stored reward is that same value.
        assert_eq!(shared_reward(&[2.0, 2.0, 2.0]), 2.0);
        let specs = CoopNavConfig::default().entity_specs();
        let l = MasacLearner::new("p", small(), &specs, &mut seed::rng(&[3])).unwrap();
        assert_eq!(l.q1.input_dim(), 48);
        assert_eq!(l.actors.len(), 3);
    }

    #[test]
    fn requires_grouped_continuous_entities() {
        let spec = EntitySpec {
            entity_id: 0,
            obs_space: crate::interface::SpaceSpec::boxed(&[1], 0.0, 1.0),
            act_space: crate::interface::SpaceSpec::discrete(2),
        };
        assert!(matches!(
            MasacLearner::new("p", small(), &[spec], &mut seed::rng(&[0])),
            Err(LearnerError::UnsupportedSpace { .. })
        ));
        assert!(matches!(MasacLearner::new("p", small(), &[], &mut seed::rng(&[0])), Err(LearnerError::NotGrouped)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let specs = CoopNavConfig::default().entity_specs();
        let l = MasacLearner::new("p", small(), &specs, &mut seed::rng(&[3])).unwrap();
        let mut m = MasacLearner::new("p", small(), &specs, &mut seed::rng(&[4])).unwrap();
        m.restore(&l.snapshot()).unwrap();
        assert_eq!(m.snapshot().to_bytes(), l.snapshot().to_bytes());
    }
}
