//! The hard-negative descriptor cache: embeddings of the training pool
//! under a frozen snapshot of the model, refreshed on a fixed interval.

use rayon::prelude::*;

use crate::descriptor::{embed_features, Descriptor, EmbeddingModel};
use crate::error::Result;

/// Descriptors aligned 1:1 with the pool the cache was refreshed from.
#[derive(Debug, Clone, Default)]
pub struct NegativeCache {
    descriptors: Vec<Descriptor>,
}

impl NegativeCache {
    pub fn empty() -> Self {
        NegativeCache::default()
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn descriptor(&self, pool_index: usize) -> &Descriptor {
        &self.descriptors[pool_index]
    }

    pub fn descriptors(&self) -> &[Descriptor] {
        &self.descriptors
    }
}

/// Re-embed the whole pool under the current parameters. Order-preserving,
/// so parallelism cannot change the cache.
pub fn refresh_negative_cache(
    model: &EmbeddingModel,
    pool_features: &[Vec<f64>],
) -> Result<NegativeCache> {
    let descriptors = pool_features
        .par_iter()
        .map(|f| embed_features(f, model))
        .collect::<Result<Vec<_>>>()?;
    Ok(NegativeCache { descriptors })
}

/// Among geo-valid candidates, the one nearest the anchor in cached
/// embedding space. Ties break to the lowest pool index. `None` when the
/// cache is empty (callers fall back to uniform mining).
pub fn select_hard_negative(
    cache: &NegativeCache,
    anchor_pool_index: usize,
    candidates: &[usize],
) -> Option<usize> {
    if cache.is_empty() || candidates.is_empty() {
        return None;
    }
    let anchor = cache.descriptor(anchor_pool_index);
    let mut best: Option<(f64, usize)> = None;
    for &c in candidates {
        let d = cache.descriptor(c).distance(anchor);
        if best.map_or(true, |(bd, _)| d < bd) {
            best = Some((d, c));
        }
    }
    best.map(|(_, c)| c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_features(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = crate::seeds::rng_for(seed, "cache-test", 0);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(0.0..4.0)).collect())
            .collect()
    }

    #[test]
    fn identical_model_gives_bitwise_identical_cache() {
        let features = random_features(40, 6, 1);
        let model = EmbeddingModel::random(6, 5, 4, 2);
        let a = refresh_negative_cache(&model, &features).unwrap();
        let b = refresh_negative_cache(&model, &features).unwrap();
        assert_eq!(a.descriptors(), b.descriptors());
    }

    #[test]
    fn hard_negative_matches_exhaustive_scan() {
        let features = random_features(60, 6, 3);
        let model = EmbeddingModel::random(6, 5, 4, 4);
        let cache = refresh_negative_cache(&model, &features).unwrap();
        let candidates: Vec<usize> = (10..50).collect();
        let anchor = 3usize;
        let picked = select_hard_negative(&cache, anchor, &candidates).unwrap();

        let mut best = candidates[0];
        let mut best_d = f64::INFINITY;
        for &c in &candidates {
            let d = cache.descriptor(c).distance(cache.descriptor(anchor));
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        assert_eq!(picked, best);
    }

    #[test]
    fn empty_pool_yields_empty_cache_and_fallback() {
        let model = EmbeddingModel::random(6, 5, 4, 5);
        let cache = refresh_negative_cache(&model, &[]).unwrap();
        assert!(cache.is_empty());
        assert_eq!(select_hard_negative(&cache, 0, &[1, 2]), None);
    }
}
