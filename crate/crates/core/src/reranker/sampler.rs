use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Draws fresh negatives for every example in every epoch from the
/// retriever's candidate pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeSampler {
    pub pool_size: usize,
    pub n_negatives: usize,
    pub seed: u64,
}

impl Default for NegativeSampler {
    fn default() -> Self {
        NegativeSampler {
            pool_size: 100,
            n_negatives: 30,
            seed: 0,
        }
    }
}

impl NegativeSampler {
    pub fn rng(&self, epoch: usize, example_id: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((epoch as u64).to_le_bytes());
        h.update(example_id.as_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    /// Uniform sample without replacement from the first `pool_size`
    /// candidates minus `positives`, returned in pool order.
    pub fn sample<S: AsRef<str>>(
        &self,
        candidates: &[S],
        positives: &[S],
        epoch: usize,
        example_id: &str,
    ) -> Vec<String> {
        let pool: Vec<&str> = candidates
            .iter()
            .take(self.pool_size)
            .map(AsRef::as_ref)
            .filter(|c| !positives.iter().any(|p| p.as_ref() == *c))
            .collect();
        if pool.is_empty() {
            warn!("no negatives left for {example_id} after removing positives");
            return Vec::new();
        }
        let n = self.n_negatives.min(pool.len());
        let mut rng = self.rng(epoch, example_id);
        let mut picked = rand::seq::index::sample(&mut rng, pool.len(), n).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| pool[i].to_string()).collect()
    }
}
