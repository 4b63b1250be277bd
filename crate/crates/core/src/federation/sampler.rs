//! Mini-batch index sampling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Epoch-style sampler that always yields batches of exactly the configured
/// size: it walks seeded shuffles of `0..n` and tops a short tail up from the
/// next shuffle, so cost accounting can assume full batches everywhere.
pub struct BatchSampler {
    n: usize,
    batch: usize,
    rng: ChaCha8Rng,
    queue: Vec<usize>,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        assert!(n > 0, "cannot sample from an empty shard");
        assert!(batch > 0, "batch size must be ≥ 1");
        BatchSampler { n, batch, rng: ChaCha8Rng::seed_from_u64(seed), queue: Vec::new() }
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Number of batches that covers every example at least once.
    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch)
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        while self.queue.len() < self.batch {
            let mut perm: Vec<usize> = (0..self.n).collect();
            perm.shuffle(&mut self.rng);
            // Queue is consumed from the back; prepend so the current tail
            // still drains first.
            perm.extend(self.queue.drain(..).rev());
            self.queue = perm;
        }
        let split = self.queue.len() - self.batch;
        let mut out = self.queue.split_off(split);
        out.reverse();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_have_exact_size() {
        let mut s = BatchSampler::new(10, 4, 3);
        for _ in 0..25 {
            assert_eq!(s.next_batch().len(), 4);
        }
    }

    #[test]
    fn first_epoch_covers_every_index() {
        let mut s = BatchSampler::new(12, 4, 5);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn tail_top_up_still_covers_epoch() {
        // n=10, batch=4: the third batch spans the 2-example tail plus two
        // from the next shuffle.
        let mut s = BatchSampler::new(10, 4, 9);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch()).collect();
        assert_eq!(seen.len(), 12);
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batch_larger_than_shard_repeats_across_epochs() {
        let mut s = BatchSampler::new(3, 7, 1);
        let b = s.next_batch();
        assert_eq!(b.len(), 7);
        assert!(b.iter().all(|&i| i < 3));
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let mut a = BatchSampler::new(20, 6, 42);
        let mut b = BatchSampler::new(20, 6, 42);
        for _ in 0..10 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
    }

    #[test]
    #[should_panic(expected = "empty shard")]
    fn empty_shard_rejected() {
        BatchSampler::new(0, 4, 0);
    }
}
