use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;

/// Emits class-balanced mini-batches: every batch holds exactly
/// `batch_size / 2` failures and `batch_size / 2` successes.
///
/// One epoch sweeps the larger class once in shuffled order, `batch_size / 2`
/// examples per batch; a short final chunk is topped up with uniform draws
/// from that class. The smaller class is drawn uniformly with replacement for
/// every batch. An epoch therefore has `ceil(n_major / (batch_size / 2))` batches.
#[derive(Debug, Clone)]
pub struct RebalancedBatcher {
    positives: Vec<usize>,
    negatives: Vec<usize>,
    batch_size: usize,
}

impl RebalancedBatcher {
    pub fn new(labels: &[bool], batch_size: usize) -> Result<Self> {
        if batch_size < 2 || batch_size % 2 != 0 {
            return Err(invalid(format!("batch size must be even and >= 2, got {batch_size}")));
        }
        let (positives, negatives): (Vec<usize>, Vec<usize>) =
            (0..labels.len()).partition(|&i| labels[i]);
        if positives.is_empty() || negatives.is_empty() {
            return Err(Error::SingleClass);
        }
        Ok(Self {
            positives,
            negatives,
            batch_size,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    fn split(&self) -> (&[usize], &[usize]) {
        if self.positives.len() >= self.negatives.len() {
            (&self.positives, &self.negatives)
        } else {
            (&self.negatives, &self.positives)
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        let half = self.batch_size / 2;
        self.split().0.len().div_ceil(half)
    }

    /// Index batches for one epoch.
    pub fn epoch(&self, rng: &mut Rng) -> Vec<Vec<usize>> {
        let half = self.batch_size / 2;
        let (major, minor) = self.split();
        let mut order = major.to_vec();
        order.shuffle(rng);
        let mut batches = Vec::with_capacity(self.steps_per_epoch());
        for chunk in order.chunks(half) {
            let mut batch = Vec::with_capacity(self.batch_size);
            batch.extend_from_slice(chunk);
            while batch.len() < half {
                batch.push(major[rng.random_range(0..major.len())]);
            }
            for _ in 0..half {
                batch.push(minor[rng.random_range(0..minor.len())]);
            }
            batches.push(batch);
        }
        batches
    }
}
