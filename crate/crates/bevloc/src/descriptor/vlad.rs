//! VLAD pooling: sums of residuals between local features and their nearest
//! vocabulary centers, intra-normalized per cluster, concatenated and
//! globally ell-2 normalized.

use crate::error::{Error, Result};

use super::{Descriptor, Vocabulary};

/// A bag of local feature vectors with a uniform dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatureSet {
    features: Vec<Vec<f64>>,
    dim: usize,
}

impl LocalFeatureSet {
    /// `dim` governs the set even when empty; all features must match it.
    pub fn new(features: Vec<Vec<f64>>, dim: usize) -> LocalFeatureSet {
        for f in &features {
            assert_eq!(f.len(), dim, "local feature dimension mismatch");
        }
        LocalFeatureSet { features, dim }
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Pool a feature set against a vocabulary. The output dimension is k*d.
///
/// Zero-residual clusters stay zero through intra-normalization, and an
/// input whose residuals all vanish (or an empty input) yields the zero
/// descriptor flagged invalid.
pub fn vlad_pool(features: &LocalFeatureSet, vocab: &Vocabulary) -> Result<Descriptor> {
    if features.dim() != vocab.d {
        return Err(Error::DimensionMismatch {
            expected: vocab.d,
            actual: features.dim(),
        });
    }
    let (k, d) = (vocab.k, vocab.d);
    if features.is_empty() {
        return Ok(Descriptor::invalid(k * d));
    }

    let mut blocks = vec![0f64; k * d];
    for f in features.features() {
        let j = vocab.assign(f);
        let center = &vocab.centers()[j];
        let block = &mut blocks[j * d..(j + 1) * d];
        for i in 0..d {
            block[i] += f[i] - center[i];
        }
    }

    // Intra-normalization; empty or zero-residual blocks stay zero.
    for j in 0..k {
        let block = &mut blocks[j * d..(j + 1) * d];
        let norm = block.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for v in block.iter_mut() {
                *v /= norm;
            }
        }
    }

    Ok(Descriptor::normalized(&blocks))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab_from_centers(centers: Vec<Vec<f64>>) -> Vocabulary {
        Vocabulary::from_centers(centers, 0).unwrap()
    }

    #[test]
    fn zero_residuals_yield_invalid_descriptor() {
        let vocab = vocab_from_centers(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let feats = LocalFeatureSet::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 2);
        let desc = vlad_pool(&feats, &vocab).unwrap();
        assert!(!desc.is_valid());
        assert!(desc.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_block_is_normalized_residual() {
        let vocab = vocab_from_centers(vec![vec![1.0, 2.0]]);
        let feats = LocalFeatureSet::new(vec![vec![4.0, 6.0]], 2);
        let desc = vlad_pool(&feats, &vocab).unwrap();
        // Residual (3, 4) -> normalized (0.6, 0.8).
        assert!((desc.values()[0] as f64 - 0.6).abs() < 1e-6);
        assert!((desc.values()[1] as f64 - 0.8).abs() < 1e-6);
    }

    #[test]
    fn hand_computed_two_cluster_pool() {
        // Centers c0=(0,0), c1=(10,0); features a=(1,0), b=(0,2) nearest c0,
        // c=(11,1) nearest c1.
        let vocab = vocab_from_centers(vec![vec![0.0, 0.0], vec![10.0, 0.0]]);
        let feats = LocalFeatureSet::new(
            vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![11.0, 1.0]],
            2,
        );
        let desc = vlad_pool(&feats, &vocab).unwrap();
        // Block 0 residual sum: (1,2), norm sqrt(5).
        // Block 1 residual sum: (1,1), norm sqrt(2).
        // After intra-norm each block is unit, global norm sqrt(2).
        let s5 = 5f64.sqrt();
        let s2 = 2f64.sqrt();
        let g = 2f64.sqrt();
        let expected = [1.0 / s5 / g, 2.0 / s5 / g, 1.0 / s2 / g, 1.0 / s2 / g];
        for (got, want) in desc.values().iter().zip(expected) {
            assert!((*got as f64 - want).abs() < 1e-6, "{got} vs {want}");
        }
        assert!((desc.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn permutation_invariant() {
        let vocab = vocab_from_centers(vec![vec![0.0, 0.0], vec![5.0, 5.0]]);
        let fwd = vec![vec![1.0, 0.5], vec![4.0, 6.0], vec![-1.0, 2.0]];
        let mut rev = fwd.clone();
        rev.reverse();
        let a = vlad_pool(&LocalFeatureSet::new(fwd, 2), &vocab).unwrap();
        let b = vlad_pool(&LocalFeatureSet::new(rev, 2), &vocab).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let vocab = vocab_from_centers(vec![vec![0.0, 0.0]]);
        let feats = LocalFeatureSet::new(vec![vec![1.0, 2.0, 3.0]], 3);
        assert!(matches!(
            vlad_pool(&feats, &vocab),
            Err(Error::DimensionMismatch { expected: 2, actual: 3 })
        ));
    }

    #[test]
    fn empty_input_yields_invalid_zero_descriptor() {
        let vocab = vocab_from_centers(vec![vec![0.0, 0.0], vec![1.0, 1.0]]);
        let desc = vlad_pool(&LocalFeatureSet::new(vec![], 2), &vocab).unwrap();
        assert!(!desc.is_valid());
        assert_eq!(desc.dim(), 4);
    }
}
