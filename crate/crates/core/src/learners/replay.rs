//! Uniform-sampling FIFO replay buffer over flat transitions.

use ndarray::{Array1, Array2};
use rand::Rng;

/// A sampled minibatch; rows are transitions.
#[derive(Debug, Clone)]
pub struct Batch {
    pub obs: Array2<f64>,
    pub act: Array2<f64>,
    pub reward: Array1<f64>,
    pub next_obs: Array2<f64>,
    /// 1.0 when the transition ended the episode without truncation.
    pub terminal: Array1<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reward.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    obs_dim: usize,
    act_dim: usize,
    capacity: usize,
    data: Vec<f64>,
    len: usize,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(obs_dim: usize, act_dim: usize, capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer { obs_dim, act_dim, capacity, data: Vec::new(), len: 0, head: 0 }
    }

    fn width(&self) -> usize {
        2 * self.obs_dim + self.act_dim + 2
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends one transition, evicting the oldest when full.
    pub fn push(&mut self, obs: &[f64], act: &[f64], reward: f64, next_obs: &[f64], terminal: bool) {
        assert_eq!(obs.len(), self.obs_dim, "replay obs width");
        assert_eq!(act.len(), self.act_dim, "replay act width");
        assert_eq!(next_obs.len(), self.obs_dim, "replay next_obs width");
        let w = self.width();
        let row = obs
            .iter()
            .chain(act)
            .copied()
            .chain([reward])
            .chain(next_obs.iter().copied())
            .chain([if terminal { 1.0 } else { 0.0 }]);
        if self.len < self.capacity {
            self.data.extend(row);
            self.len += 1;
        } else {
            let start = self.head * w;
            for (dst, v) in self.data[start..start + w].iter_mut().zip(row) {
                *dst = v;
            }
            self.head = (self.head + 1) % self.capacity;
        }
    }

    /// Transition `i` in insertion order, oldest first.
    pub fn get(&self, i: usize) -> &[f64] {
        assert!(i < self.len, "replay index out of range");
        let slot = (self.head + i) % self.capacity;
        let w = self.width();
        &self.data[slot * w..(slot + 1) * w]
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Batch {
        assert!(self.len > 0, "sampling from empty replay");
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.len)).collect();
        self.gather(&idx)
    }

    /// Rows at the given physical slots.
    pub fn gather(&self, idx: &[usize]) -> Batch {
        let (o, a) = (self.obs_dim, self.act_dim);
        let w = self.width();
        let n = idx.len();
        let mut b = Batch {
            obs: Array2::zeros((n, o)),
            act: Array2::zeros((n, a)),
            reward: Array1::zeros(n),
            next_obs: Array2::zeros((n, o)),
            terminal: Array1::zeros(n),
        };
        for (r, &i) in idx.iter().enumerate() {
            let row = &self.data[i * w..(i + 1) * w];
            for k in 0..o {
                b.obs[[r, k]] = row[k];
                b.next_obs[[r, k]] = row[o + a + 1 + k];
            }
            for k in 0..a {
                b.act[[r, k]] = row[o + k];
            }
            b.reward[r] = row[o + a];
            b.terminal[r] = row[w - 1];
        }
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn evicts_oldest() {
        let mut rb = ReplayBuffer::new(1, 1, 3);
        for k in 0..5 {
            rb.push(&[k as f64], &[0.0], k as f64, &[k as f64 + 1.0], k == 4);
        }
        assert_eq!(rb.len(), 3);
        let rewards: Vec<f64> = (0..3).map(|i| rb.get(i)[2]).collect();
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
        assert_eq!(rb.get(2)[4], 1.0);
    }

    #[test]
    fn sample_covers_contents() {
        let mut rb = ReplayBuffer::new(2, 1, 10);
        for k in 0..10 {
            rb.push(&[k as f64, 0.0], &[1.0], k as f64, &[0.0, k as f64], false);
        }
        let mut rng = seed::rng(&[9]);
        let b = rb.sample(500, &mut rng);
        assert_eq!(b.len(), 500);
        for r in 0..500 {
            assert_eq!(b.obs[[r, 0]], b.reward[r]);
            assert_eq!(b.next_obs[[r, 1]], b.reward[r]);
        }
        let mut seen = [false; 10];
        b.reward.iter().for_each(|&r| seen[r as usize] = true);
        assert!(seen.iter().all(|&s| s));
    }
}
