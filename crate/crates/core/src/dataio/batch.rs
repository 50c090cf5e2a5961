use crate::error::{domain, Result};
use crate::numerics::RngState;

/// Batches smaller than this many points per expected cluster trigger a warning.
pub const MIN_POINTS_PER_CLUSTER: usize = 10;

/// Draws uniformly random index subsets (without replacement inside a batch).
#[derive(Clone, Debug)]
pub struct BatchSampler {
    batch_size: usize,
    n: usize,
    rng: RngState,
    scratch: Vec<usize>,
}

impl BatchSampler {
    pub fn new(batch_size: usize, n: usize, rng: RngState) -> Result<Self> {
        if batch_size == 0 {
            return Err(domain("batch size must be at least 1"));
        }
        if batch_size > n {
            return Err(domain(format!(
                "batch size {batch_size} exceeds the number of points {n}"
            )));
        }
        Ok(Self {
            batch_size,
            n,
            rng,
            scratch: (0..n).collect(),
        })
    }

    /// Like [`BatchSampler::new`], warning when batches are too small to hold
    /// a representative sample of `clusters` clusters.
    pub fn for_clusters(batch_size: usize, n: usize, clusters: usize, rng: RngState) -> Result<Self> {
        let sampler = Self::new(batch_size, n, rng)?;
        if batch_size < MIN_POINTS_PER_CLUSTER * clusters {
            log::warn!(
                "batch size {batch_size} is below {} points for {clusters} clusters; \
                 batches may miss whole clusters",
                MIN_POINTS_PER_CLUSTER * clusters
            );
        }
        Ok(sampler)
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn rng_mut(&mut self) -> &mut RngState {
        &mut self.rng
    }

    /// `batch_size` distinct indices, uniform over all subsets of that size.
    pub fn sample_batch(&mut self) -> Vec<usize> {
        // Partial Fisher-Yates over a persistent permutation; any starting
        // permutation yields a uniform subset.
        for i in 0..self.batch_size {
            let j = i + self.rng.below(self.n - i);
            self.scratch.swap(i, j);
        }
        self.scratch[..self.batch_size].to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_batch_is_a_permutation() {
        let mut s = BatchSampler::new(50, 50, RngState::new(1)).unwrap();
        let mut b = s.sample_batch();
        b.sort_unstable();
        assert_eq!(b, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn oversized_batch_is_rejected() {
        assert!(BatchSampler::new(11, 10, RngState::new(1)).is_err());
        assert!(BatchSampler::new(0, 10, RngState::new(1)).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let mut a = BatchSampler::new(7, 100, RngState::new(9)).unwrap();
        let mut b = BatchSampler::new(7, 100, RngState::new(9)).unwrap();
        for _ in 0..5 {
            assert_eq!(a.sample_batch(), b.sample_batch());
        }
    }

    #[test]
    fn indices_are_distinct() {
        let mut s = BatchSampler::new(30, 40, RngState::new(2)).unwrap();
        for _ in 0..20 {
            let mut b = s.sample_batch();
            b.sort_unstable();
            b.dedup();
            assert_eq!(b.len(), 30);
        }
    }
}
