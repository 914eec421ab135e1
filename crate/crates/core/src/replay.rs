//! Failure-prioritized experience replay.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Priority given to entries whose TD error is not known yet; also the lower
/// bound of every stored priority.
pub const PRIORITY_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Continuous(Vec<f64>),
    Discrete(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub state: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
    pub fail: bool,
    /// Next-state action mask for discrete agents (empty means all allowed).
    pub next_mask: Vec<bool>,
}

impl Experience {
    pub fn is_finite(&self) -> bool {
        self.reward.is_finite()
            && self.state.iter().all(|v| v.is_finite())
            && self.next_state.iter().all(|v| v.is_finite())
            && match &self.action {
                Action::Continuous(a) => a.iter().all(|v| v.is_finite()),
                Action::Discrete(_) => true,
            }
    }
}

/// `|TD|·(1 + γ_fail·I_fail)`.
pub fn priority_weight(td_abs: f64, fail: bool, gamma_fail: f64) -> f64 {
    td_abs.abs() * (1.0 + if fail { gamma_fail } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    #[default]
    Prioritized,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReplayError {
    #[error("buffer holds {have} experiences, batch needs {need}")]
    Insufficient { have: usize, need: usize },
    #[error("experience contains non-finite values")]
    NonFinite,
    #[error("capacity must be positive")]
    ZeroCapacity,
}

/// Ring buffer with proportional sampling over stored priorities.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Experience>,
    priorities: Vec<f64>,
    /// Insertion sequence number of each slot, for eviction checks.
    seq: Vec<u64>,
    head: usize,
    pushed: u64,
    pub gamma_fail: f64,
    pub mode: SamplingMode,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, gamma_fail: f64, mode: SamplingMode) -> Result<Self, ReplayError> {
        if capacity == 0 {
            return Err(ReplayError::ZeroCapacity);
        }
        Ok(Self {
            capacity,
            items: Vec::new(),
            priorities: Vec::new(),
            seq: Vec::new(),
            head: 0,
            pushed: 0,
            gamma_fail,
            mode,
        })
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

    pub fn priority(&self, index: usize) -> f64 {
        self.priorities[index]
    }

    pub fn get(&self, index: usize) -> &Experience {
        &self.items[index]
    }

    /// Insertion number of the entry at `index` (0 for the first push).
    pub fn sequence(&self, index: usize) -> u64 {
        self.seq[index]
    }

    fn weight(&self, td_abs: f64, fail: bool) -> f64 {
        priority_weight(td_abs, fail, self.gamma_fail).max(PRIORITY_FLOOR)
    }

    /// Stores an experience. With a known TD error the priority follows the
    /// failure-weighted rule; otherwise it starts at the floor. At capacity the
    /// oldest entry is overwritten.
    pub fn push(&mut self, exp: Experience, td_abs: Option<f64>) -> Result<(), ReplayError> {
        if !exp.is_finite() {
            return Err(ReplayError::NonFinite);
        }
        let w = match td_abs {
            Some(td) if td.is_finite() => self.weight(td, exp.fail),
            _ => PRIORITY_FLOOR,
        };
        if self.items.len() < self.capacity {
            self.items.push(exp);
            self.priorities.push(w);
            self.seq.push(self.pushed);
        } else {
            self.items[self.head] = exp;
            self.priorities[self.head] = w;
            self.seq[self.head] = self.pushed;
        }
        self.head = (self.head + 1) % self.capacity;
        self.pushed += 1;
        Ok(())
    }

    /// Draws `n` indices with replacement, proportionally to priority (or
    /// uniformly in uniform mode).
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>, ReplayError> {
        if self.items.len() < n || n == 0 && self.items.is_empty() {
            return Err(ReplayError::Insufficient {
                have: self.items.len(),
                need: n,
            });
        }
        Ok(self.draw(n, rng))
    }

    fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        let len = self.items.len();
        if self.mode == SamplingMode::Uniform {
            return (0..n).map(|_| rng.random_range(0..len)).collect();
        }
        let mut prefix = Vec::with_capacity(len);
        let mut acc = 0.0;
        for &p in &self.priorities {
            acc += p;
            prefix.push(acc);
        }
        (0..n)
            .map(|_| {
                let u = rng.random::<f64>() * acc;
                prefix.partition_point(|&c| c <= u).min(len - 1)
            })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<(usize, &Experience)>, ReplayError> {
        Ok(self
            .sample_indices(n, rng)?
            .into_iter()
            .map(|i| (i, &self.items[i]))
            .collect())
    }

    /// Rewrites priorities after a training pass with fresh TD errors.
    pub fn update_priorities(&mut self, indices: &[usize], td_abs: &[f64]) {
        for (&i, &td) in indices.iter().zip(td_abs) {
            if i < self.items.len() && td.is_finite() {
                self.priorities[i] = self.weight(td, self.items[i].fail);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn exp(tag: f64, fail: bool) -> Experience {
        Experience {
            state: vec![tag],
            action: Action::Discrete(0),
            reward: tag,
            next_state: vec![tag],
            terminal: false,
            fail,
            next_mask: Vec::new(),
        }
    }

    #[test]
    fn weight_examples() {
        assert_eq!(priority_weight(0.7, false, 1.5), 0.7);
        assert_eq!(priority_weight(1.0, true, 1.5), 2.5);
        assert_eq!(priority_weight(0.0, true, 1.5), 0.0);
    }

    #[test]
    fn ring_eviction_is_fifo() {
        let mut b = ReplayBuffer::new(3, 1.5, SamplingMode::Prioritized).unwrap();
        for i in 0..5 {
            b.push(exp(i as f64, false), None).unwrap();
        }
        assert_eq!(b.len(), 3);
        let mut tags: Vec<f64> = (0..3).map(|i| b.get(i).reward).collect();
        tags.sort_by(f64::total_cmp);
        assert_eq!(tags, vec![2.0, 3.0, 4.0]);
        let mut seqs: Vec<u64> = (0..3).map(|i| b.sequence(i)).collect();
        seqs.sort();
        assert_eq!(seqs, vec![2, 3, 4]);
    }

    #[test]
    fn fresh_entry_gets_floor_and_single_entry_is_sampled() {
        let mut b = ReplayBuffer::new(10, 1.5, SamplingMode::Prioritized).unwrap();
        b.push(exp(7.0, true), None).unwrap();
        assert_eq!(b.priority(0), PRIORITY_FLOOR);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = b.sample(4, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(s.is_err());
        let s = b.sample(1, &mut rng).unwrap();
        assert_eq!(s[0].1.reward, 7.0);
        b.push(exp(1.0, true), Some(2.0)).unwrap();
        assert_eq!(b.priority(1), 5.0);
        b.push(exp(1.0, true), Some(0.0)).unwrap();
        assert_eq!(b.priority(2), PRIORITY_FLOOR);
    }

    #[test]
    fn insufficient_is_an_error() {
        let b = ReplayBuffer::new(10, 1.5, SamplingMode::Prioritized).unwrap();
        assert_eq!(
            b.sample_indices(1, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(ReplayError::Insufficient { have: 0, need: 1 })
        );
    }

    #[test]
    fn three_to_one_weights() {
        let mut b = ReplayBuffer::new(10, 1.5, SamplingMode::Prioritized).unwrap();
        b.push(exp(0.0, false), Some(3.0)).unwrap();
        b.push(exp(1.0, false), Some(1.0)).unwrap();
        let idx = b.draw(100_000, &mut ChaCha8Rng::seed_from_u64(5));
        let f = idx.iter().filter(|&&i| i == 0).count() as f64 / 1e5;
        assert!((f - 0.75).abs() < 0.01, "{f}");
    }

    #[test]
    fn proportional_frequencies_within_two_points() {
        let mut b = ReplayBuffer::new(100, 1.5, SamplingMode::Prioritized).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in 0..20 {
            let td: f64 = rng.random_range(0.0..2.0);
            b.push(exp(i as f64, i % 3 == 0), Some(td)).unwrap();
        }
        let total: f64 = (0..20).map(|i| b.priority(i)).sum();
        let idx = b.draw(100_000, &mut rng);
        let mut counts = [0usize; 20];
        for i in idx {
            counts[i] += 1;
        }
        for i in 0..20 {
            let f = counts[i] as f64 / 1e5;
            assert!((f - b.priority(i) / total).abs() < 0.02);
        }
    }

    #[test]
    fn equal_weights_sample_uniformly() {
        // chi-square against uniform with 9 degrees of freedom, 0.999 quantile 27.88
        for mode in [SamplingMode::Prioritized, SamplingMode::Uniform] {
            let mut b = ReplayBuffer::new(10, 1.5, mode).unwrap();
            for i in 0..10 {
                b.push(exp(i as f64, i % 2 == 0), Some(if mode == SamplingMode::Uniform { i as f64 } else { 1.0 }))
                    .unwrap();
            }
            if mode == SamplingMode::Prioritized {
                b.gamma_fail = 0.0;
                b.update_priorities(&(0..10).collect::<Vec<_>>(), &[1.0; 10]);
            }
            let idx = b.draw(100_000, &mut ChaCha8Rng::seed_from_u64(3));
            let mut counts = [0f64; 10];
            for i in idx {
                counts[i] += 1.0;
            }
            let chi: f64 = counts.iter().map(|c| (c - 1e4).powi(2) / 1e4).sum();
            assert!(chi < 27.88, "{mode:?} chi2 {chi}");
        }
    }

    #[test]
    fn priorities_rewritten_after_use() {
        let mut b = ReplayBuffer::new(4, 1.5, SamplingMode::Prioritized).unwrap();
        b.push(exp(0.0, true), None).unwrap();
        b.push(exp(0.0, false), None).unwrap();
        b.update_priorities(&[0, 1], &[2.0, 2.0]);
        assert_eq!(b.priority(0), 5.0);
        assert_eq!(b.priority(1), 2.0);
    }

    #[test]
    fn non_finite_experience_rejected() {
        let mut b = ReplayBuffer::new(4, 1.5, SamplingMode::Prioritized).unwrap();
        assert_eq!(b.push(exp(f64::NAN, false), None), Err(ReplayError::NonFinite));
        assert!(ReplayBuffer::new(0, 1.5, SamplingMode::Uniform).is_err());
    }
}
