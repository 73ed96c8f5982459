//! Fixed-capacity ring buffer of transitions.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: DVector<f64>,
    pub action: DVector<f64>,
    pub reward: f64,
    pub next_obs: DVector<f64>,
    pub done: bool,
}

/// Column-batched minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub obs: DMatrix<f64>,
    pub action: DMatrix<f64>,
    pub reward: DVector<f64>,
    pub next_obs: DMatrix<f64>,
    pub done: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Overwrites the oldest transition once full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform sampling with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Batch {
        assert!(!self.items.is_empty(), "cannot sample an empty buffer");
        let first = &self.items[0];
        let (n, m) = (first.obs.len(), first.action.len());
        let mut out = Batch {
            obs: DMatrix::zeros(n, batch),
            action: DMatrix::zeros(m, batch),
            reward: DVector::zeros(batch),
            next_obs: DMatrix::zeros(n, batch),
            done: DVector::zeros(batch),
        };
        for b in 0..batch {
            let t = &self.items[rng.gen_range(0..self.items.len())];
            out.obs.set_column(b, &t.obs);
            out.action.set_column(b, &t.action);
            out.reward[b] = t.reward;
            out.next_obs.set_column(b, &t.next_obs);
            out.done[b] = if t.done { 1.0 } else { 0.0 };
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(i: usize) -> Transition {
        Transition {
            obs: DVector::from_element(1, i as f64),
            action: DVector::from_element(1, 0.0),
            reward: i as f64,
            next_obs: DVector::from_element(1, i as f64 + 1.0),
            done: false,
        }
    }

    #[test]
    fn ring_keeps_newest() {
        let mut buf = ReplayBuffer::new(3);
        for i in 0..5 {
            buf.push(tr(i));
        }
        assert_eq!(buf.len(), 3);
        let mut rewards: Vec<f64> = buf.iter().map(|t| t.reward).collect();
        rewards.sort_by(f64::total_cmp);
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn samples_come_from_stored_set() {
        let mut buf = ReplayBuffer::new(10);
        for i in 0..4 {
            buf.push(tr(i));
        }
        let b = buf.sample(32, &mut ChaCha8Rng::seed_from_u64(0));
        for k in 0..32 {
            assert!((0.0..4.0).contains(&b.reward[k]));
            assert_eq!(b.next_obs[(0, k)], b.obs[(0, k)] + 1.0);
        }
    }
}
