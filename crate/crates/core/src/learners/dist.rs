//! Action distributions: tanh-squashed Gaussian (SAC family) and categorical
//! (PPO on discrete spaces).

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;
const LN_2: f64 = std::f64::consts::LN_2;

/// Per-dimension affine map from `[-1, 1]` onto `[low, high]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionBounds {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl ActionBounds {
    pub fn uniform(dim: usize, low: f64, high: f64) -> Self {
        ActionBounds { low: vec![low; dim], high: vec![high; dim] }
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn scale(&self, j: usize) -> f64 {
        0.5 * (self.high[j] - self.low[j])
    }

    pub fn offset(&self, j: usize) -> f64 {
        0.5 * (self.high[j] + self.low[j])
    }

    pub fn concat(parts: &[ActionBounds]) -> Self {
        ActionBounds {
            low: parts.iter().flat_map(|b| b.low.iter().copied()).collect(),
            high: parts.iter().flat_map(|b| b.high.iter().copied()).collect(),
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln(1 - tanh(u)^2)` without cancellation for large `|u|`.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (LN_2 - u - softplus(-2.0 * u))
}

/// Draws standard normal noise of the given shape, row by row.
pub fn normal_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Batched reparameterised sample of a tanh-squashed Gaussian with enough
/// saved state to backpropagate into the network output.
pub struct SquashedBatch {
    pub actions: Array2<f64>,
    pub log_prob: Array1<f64>,
    tanh_u: Array2<f64>,
    sigma_eps: Array2<f64>,
    log_std_live: Array2<bool>,
}

/// `net_out` rows are `[mean (A), raw log_std (A)]`; `noise` is `B x A`.
pub fn squashed_sample(net_out: ArrayView2<f64>, bounds: &ActionBounds, noise: ArrayView2<f64>) -> SquashedBatch {
    let (b, a) = noise.dim();
    assert_eq!(net_out.dim(), (b, 2 * a), "policy head width");
    assert_eq!(bounds.dim(), a, "bounds width");
    let mut actions = Array2::zeros((b, a));
    let mut log_prob = Array1::zeros(b);
    let mut tanh_u = Array2::zeros((b, a));
    let mut sigma_eps = Array2::zeros((b, a));
    let mut log_std_live = Array2::from_elem((b, a), true);
    for i in 0..b {
        let mut lp = 0.0;
        for j in 0..a {
            let mu = net_out[[i, j]];
            let raw = net_out[[i, a + j]];
            let log_std = raw.clamp(LOG_STD_MIN, LOG_STD_MAX);
            log_std_live[[i, j]] = (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw);
            let eps = noise[[i, j]];
            let se = log_std.exp() * eps;
            let u = mu + se;
            let t = u.tanh();
            tanh_u[[i, j]] = t;
            sigma_eps[[i, j]] = se;
            actions[[i, j]] = bounds.offset(j) + bounds.scale(j) * t;
            lp += -0.5 * eps * eps - log_std - HALF_LOG_2PI - log_one_minus_tanh_sq(u) - bounds.scale(j).ln();
        }
        log_prob[i] = lp;
    }
    SquashedBatch { actions, log_prob, tanh_u, sigma_eps, log_std_live }
}

impl SquashedBatch {
    /// Maps `dL/d(action)` and `dL/d(log_prob)` to `dL/d(net_out)`.
    pub fn backward(&self, bounds: &ActionBounds, d_action: ArrayView2<f64>, d_log_prob: &Array1<f64>) -> Array2<f64> {
        let (b, a) = self.actions.dim();
        let mut d_out = Array2::zeros((b, 2 * a));
        for i in 0..b {
            for j in 0..a {
                let t = self.tanh_u[[i, j]];
                // d(action)/du and d(log_prob)/du, with eps held fixed
                let du = d_action[[i, j]] * bounds.scale(j) * (1.0 - t * t) + d_log_prob[i] * 2.0 * t;
                d_out[[i, j]] = du;
                if self.log_std_live[[i, j]] {
                    d_out[[i, a + j]] = du * self.sigma_eps[[i, j]] - d_log_prob[i];
                }
            }
        }
        d_out
    }
}

/// Single draw: returns the bounded action and its log-density, including the
/// change-of-variables terms for tanh and the affine rescale.
pub fn gaussian_policy_sample<R: Rng + ?Sized>(net_out: &[f64], bounds: &ActionBounds, rng: &mut R) -> (Vec<f64>, f64) {
    let a = bounds.dim();
    let noise = normal_noise(1, a, rng);
    let out = ArrayView2::from_shape((1, 2 * a), net_out).expect("policy head width");
    let s = squashed_sample(out, bounds, noise.view());
    (s.actions.row(0).to_vec(), s.log_prob[0])
}

/// Mean action: `tanh(mu)` mapped onto the bounds.
pub fn deterministic_action(net_out: &[f64], bounds: &ActionBounds) -> Vec<f64> {
    (0..bounds.dim()).map(|j| bounds.offset(j) + bounds.scale(j) * net_out[j].tanh()).collect()
}

/// Log-density of a given bounded action under the squashed Gaussian.
pub fn squashed_log_prob(mean: &[f64], log_std: &[f64], bounds: &ActionBounds, action: &[f64]) -> f64 {
    (0..bounds.dim())
        .map(|j| {
            let y = (action[j] - bounds.offset(j)) / bounds.scale(j);
            let u = y.atanh();
            let ls = log_std[j].clamp(LOG_STD_MIN, LOG_STD_MAX);
            let z = (u - mean[j]) / ls.exp();
            -0.5 * z * z - ls - HALF_LOG_2PI - log_one_minus_tanh_sq(u) - bounds.scale(j).ln()
        })
        .sum()
}

/// Diagonal Gaussian log-density (unsquashed), used by PPO on box spaces.
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], x: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(x)
        .map(|((m, ls), x)| {
            let z = (x - m) / ls.exp();
            -0.5 * z * z - ls - HALF_LOG_2PI
        })
        .sum()
}

pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| ls + 0.5 + HALF_LOG_2PI).sum()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn sample_categorical<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return k;
        }
    }
    log_probs.len() - 1
}

pub fn categorical_entropy(log_probs: &[f64]) -> f64 {
    -log_probs.iter().map(|lp| lp.exp() * lp).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn zero_noise_limit_is_tanh_of_mean() {
        let b = ActionBounds { low: vec![-1.0, 2.0], high: vec![1.0, 6.0] };
        let mut rng = seed::rng(&[0]);
        let out = [0.3, -0.7, -30.0, -30.0];
        let (a, _) = gaussian_policy_sample(&out, &b, &mut rng);
        assert!((a[0] - 0.3f64.tanh()).abs() < 1e-7);
        assert!((a[1] - (4.0 + 2.0 * (-0.7f64).tanh())).abs() < 1e-7);
        assert_eq!(deterministic_action(&out, &b)[0], 0.3f64.tanh());
    }

    #[test]
    fn samples_stay_in_bounds() {
        let b = ActionBounds { low: vec![-1.0, 0.5], high: vec![1.0, 0.75] };
        let mut rng = seed::rng(&[1]);
        for _ in 0..2000 {
            let out = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 1.5, 2.0];
            let (a, lp) = gaussian_policy_sample(&out, &b, &mut rng);
            assert!(a.iter().zip(&b.low).zip(&b.high).all(|((x, l), h)| x >= l && x <= h));
            assert!(lp.is_finite() || lp == f64::INFINITY);
        }
    }

    #[test]
    fn sample_log_prob_matches_density_formula() {
        let b = ActionBounds::uniform(2, -1.0, 1.0);
        let out = Array2::from_shape_vec((1, 4), vec![0.2, -0.4, -0.5, 0.1]).unwrap();
        let noise = Array2::from_shape_vec((1, 2), vec![0.3, -1.1]).unwrap();
        let s = squashed_sample(out.view(), &b, noise.view());
        let lp = squashed_log_prob(&[0.2, -0.4], &[-0.5, 0.1], &b, &s.actions.row(0).to_vec());
        assert!((lp - s.log_prob[0]).abs() < 1e-9);
    }

    /// Gaussian mass of `[u0, u1]` in pre-squash space by Simpson's rule.
    fn gaussian_mass(mu: f64, sigma: f64, u0: f64, u1: f64) -> f64 {
        let n = 4000;
        let h = (u1 - u0) / n as f64;
        let pdf = |u: f64| (-0.5 * ((u - mu) / sigma).powi(2)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        let mut s = pdf(u0) + pdf(u1);
        for k in 1..n {
            s += if k % 2 == 1 { 4.0 } else { 2.0 } * pdf(u0 + k as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn log_prob_agrees_with_quadrature() {
        let cases = [(0.3, -0.2, -1.0, 1.0), (-0.8, -1.0, 2.0, 5.0), (1.2, 0.3, -3.0, 1.0)];
        for (mu, log_std, low, high) in cases {
            let b = ActionBounds::uniform(1, low, high);
            let sigma: f64 = (log_std as f64).exp();
            // mass over action-space windows vs. the same windows pulled back through tanh
            for (y0, y1) in [(-0.5, 0.1), (0.1, 0.6), (-0.95, -0.9)] {
                let a0 = b.offset(0) + b.scale(0) * y0;
                let a1 = b.offset(0) + b.scale(0) * y1;
                let n = 4000;
                let h = (a1 - a0) / n as f64;
                let dens = |a: f64| squashed_log_prob(&[mu], &[log_std], &b, &[a]).exp();
                let mut s = dens(a0) + dens(a1);
                for k in 1..n {
                    s += if k % 2 == 1 { 4.0 } else { 2.0 } * dens(a0 + k as f64 * h);
                }
                let mass_action = s * h / 3.0;
                let mass_pre = gaussian_mass(mu, sigma, f64::atanh(y0), f64::atanh(y1));
                assert!((mass_action - mass_pre).abs() <= 1e-3, "mu={mu} [{a0},{a1}]: {mass_action} vs {mass_pre}");
                // point density from the pulled-back mass of a narrow window
                let ym = 0.5 * (y0 + y1);
                let d = 1e-4;
                let am = b.offset(0) + b.scale(0) * ym;
                let local = gaussian_mass(mu, sigma, f64::atanh(ym - d), f64::atanh(ym + d)) / (2.0 * d * b.scale(0));
                let lp = squashed_log_prob(&[mu], &[log_std], &b, &[am]);
                assert!((lp - local.ln()).abs() <= 1e-3, "point density at {am}: {lp} vs {}", local.ln());
            }
        }
    }

    #[test]
    fn categorical_helpers() {
        let lp = log_softmax(&[1.0, 2.0, 3.0]);
        let total: f64 = lp.iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let uniform = log_softmax(&[0.0; 4]);
        assert!((categorical_entropy(&uniform) - 4f64.ln()).abs() < 1e-12);
        let mut rng = seed::rng(&[5]);
        let mut counts = [0usize; 3];
        for _ in 0..30000 {
            counts[sample_categorical(&lp, &mut rng)] += 1;
        }
        let p2 = lp[2].exp();
        assert!((counts[2] as f64 / 30000.0 - p2).abs() < 0.02);
    }
}
