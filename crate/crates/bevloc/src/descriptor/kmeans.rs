//! Deterministic k-means (k-means++ seeding, Lloyd's iterations) for the
//! VLAD vocabulary, plus the vocabulary file format.
//!
//! File layout (`.pitv`): magic `PITV`, u32 k, u32 d, u64 seed, then k*d
//! center values as little-endian f32, row-major.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::cloud::{read_f32, read_u32, read_u64};
use crate::error::{Error, Result};
use crate::seeds::rng_for;

use super::vlad::LocalFeatureSet;

pub const PITV_MAGIC: &[u8; 4] = b"PITV";

/// A fitted k-means vocabulary. Centers are quantized through f32 so the
/// in-memory vocabulary is bit-identical to its file round trip.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    pub k: usize,
    pub d: usize,
    pub seed: u64,
    centers: Vec<Vec<f64>>,
}

impl Vocabulary {
    /// Build a vocabulary from explicit centers (quantized through f32,
    /// matching the fit path). Centers must be non-empty, uniform in
    /// dimension, finite and pairwise distinct.
    pub fn from_centers(centers: Vec<Vec<f64>>, seed: u64) -> Result<Vocabulary> {
        let k = centers.len();
        if k == 0 {
            return Err(Error::InvalidParameter("vocabulary needs k >= 1".into()));
        }
        let d = centers[0].len();
        let mut centers: Vec<Vec<f64>> = centers;
        for c in &mut centers {
            if c.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: c.len(),
                });
            }
            for v in c.iter_mut() {
                if !v.is_finite() {
                    return Err(Error::InvalidParameter("non-finite center".into()));
                }
                *v = *v as f32 as f64;
            }
        }
        for i in 0..k {
            for j in (i + 1)..k {
                if centers[i] == centers[j] {
                    return Err(Error::InvalidParameter(format!(
                        "centers {i} and {j} coincide"
                    )));
                }
            }
        }
        Ok(Vocabulary {
            k,
            d,
            seed,
            centers,
        })
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    /// Index of the nearest center; ties broken by lowest index.
    pub fn assign(&self, feature: &[f64]) -> usize {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (j, c) in self.centers.iter().enumerate() {
            let d = sq_dist(feature, c);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        best
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Fit a vocabulary with k-means++ initialization and Lloyd's iterations.
/// Deterministic given (features, k, seed). Stops when no assignment
/// changes or after `max_iters` Lloyd's rounds.
pub fn kmeans_fit(
    features: &LocalFeatureSet,
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<Vocabulary> {
    kmeans_fit_detailed(features, k, seed, max_iters).map(|(v, _)| v)
}

/// As [`kmeans_fit`], also returning the within-cluster distortion after
/// each assignment step (non-increasing across Lloyd's iterations).
pub fn kmeans_fit_detailed(
    features: &LocalFeatureSet,
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<(Vocabulary, Vec<f64>)> {
    let points = features.features();
    if k == 0 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    if points.len() < k {
        return Err(Error::InsufficientFeatures {
            have: points.len(),
            need: k,
        });
    }
    let d = features.dim();
    let mut rng = rng_for(seed, "kmeans++", 0);

    // k-means++ seeding: first center uniform, then weighted by squared
    // distance to the nearest chosen center. Zero-distance points carry no
    // probability mass, so duplicates of chosen centers are never re-picked.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..points.len())].clone());
    let mut min_d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = min_d2.iter().sum();
        if !(total > 0.0) {
            // Every remaining point coincides with a chosen center, so the
            // input has fewer distinct features than k.
            return Err(Error::InsufficientFeatures {
                have: centers.len(),
                need: k,
            });
        }
        let mut target = rng.random_range(0.0..total);
        let mut chosen = points.len() - 1;
        for (i, &w) in min_d2.iter().enumerate() {
            if target < w {
                chosen = i;
                break;
            }
            target -= w;
        }
        let center = points[chosen].clone();
        for (i, p) in points.iter().enumerate() {
            let dd = sq_dist(p, &center);
            if dd < min_d2[i] {
                min_d2[i] = dd;
            }
        }
        centers.push(center);
    }

    // Lloyd's iterations.
    let mut assignment = vec![usize::MAX; points.len()];
    let mut distortions = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        let mut distortion = 0.0;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (j, c) in centers.iter().enumerate() {
                let dd = sq_dist(p, c);
                if dd < best_d {
                    best_d = dd;
                    best = j;
                }
            }
            distortion += best_d;
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        distortions.push(distortion);
        if !changed {
            break;
        }
        let mut sums = vec![vec![0f64; d]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            let j = assignment[i];
            counts[j] += 1;
            for (s, v) in sums[j].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for (c, s) in centers[j].iter_mut().zip(&sums[j]) {
                    *c = s / counts[j] as f64;
                }
            }
        }
    }

    // Quantize through f32 so saved and in-memory vocabularies agree exactly.
    for c in &mut centers {
        for v in c.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
    Ok((
        Vocabulary {
            k,
            d,
            seed,
            centers,
        },
        distortions,
    ))
}

pub fn write_vocabulary(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(PITV_MAGIC).map_err(io)?;
    w.write_all(&(vocab.k as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(vocab.d as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&vocab.seed.to_le_bytes()).map_err(io)?;
    for c in &vocab.centers {
        for &v in c {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_vocabulary(path: &Path) -> Result<Vocabulary> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != PITV_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "PITV",
        });
    }
    let k = read_u32(&mut r, path)? as usize;
    let d = read_u32(&mut r, path)? as usize;
    let seed = read_u64(&mut r, path)?;
    if k == 0 || d == 0 {
        return Err(Error::malformed(path, "vocabulary with zero k or d"));
    }
    let mut centers = Vec::with_capacity(k);
    for _ in 0..k {
        let mut c = Vec::with_capacity(d);
        for _ in 0..d {
            c.push(read_f32(&mut r, path)? as f64);
        }
        centers.push(c);
    }
    Ok(Vocabulary { k, d, seed, centers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn feature_set(points: Vec<Vec<f64>>) -> LocalFeatureSet {
        let d = points[0].len();
        LocalFeatureSet::new(points, d)
    }

    #[test]
    fn two_separated_groups_recover_means() {
        let mut points = Vec::new();
        for i in 0..10 {
            points.push(vec![0.0 + 0.01 * i as f64, 0.0]);
            points.push(vec![10.0 + 0.01 * i as f64, 5.0]);
        }
        let vocab = kmeans_fit(&feature_set(points.clone()), 2, 42, 100).unwrap();
        let mean_a: f64 = (0..10).map(|i| 0.01 * i as f64).sum::<f64>() / 10.0;
        let mut xs: Vec<f64> = vocab.centers().iter().map(|c| c[0]).collect();
        xs.sort_by(f64::total_cmp);
        assert!((xs[0] - mean_a).abs() < 1e-6);
        assert!((xs[1] - (10.0 + mean_a)).abs() < 1e-6);
    }

    #[test]
    fn k_equals_n_yields_permutation_of_points() {
        let points = vec![vec![0.0, 0.0], vec![5.0, 0.0], vec![0.0, 5.0], vec![7.0, 7.0]];
        let vocab = kmeans_fit(&feature_set(points.clone()), 4, 7, 50).unwrap();
        let mut found = vec![false; 4];
        for c in vocab.centers() {
            let i = points.iter().position(|p| sq_dist(p, c) < 1e-18).unwrap();
            assert!(!found[i], "center repeated");
            found[i] = true;
        }
    }

    #[test]
    fn insufficient_features_is_an_error() {
        let points = vec![vec![1.0], vec![2.0]];
        assert!(matches!(
            kmeans_fit(&feature_set(points), 3, 0, 10),
            Err(Error::InsufficientFeatures { have: 2, need: 3 })
        ));
    }

    #[test]
    fn distortion_beats_random_center_subsets() {
        let mut rng = rng_for(123, "kmeans-test", 0);
        let points: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let set = feature_set(points.clone());
        let (vocab, history) = kmeans_fit_detailed(&set, 8, 9, 100).unwrap();
        for w in history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "distortion increased: {w:?}");
        }
        let fitted = distortion_of(&points, vocab.centers());
        for trial in 0..100 {
            let mut trial_rng = rng_for(trial, "kmeans-restart", 1);
            let mut centers = Vec::new();
            let mut used = std::collections::HashSet::new();
            while centers.len() < 8 {
                let i = trial_rng.random_range(0..points.len());
                if used.insert(i) {
                    centers.push(points[i].clone());
                }
            }
            assert!(fitted <= distortion_of(&points, &centers) + 1e-9);
        }
    }

    fn distortion_of(points: &[Vec<f64>], centers: &[Vec<f64>]) -> f64 {
        points
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|c| sq_dist(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum()
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = rng_for(5, "kmeans-test", 1);
        let points: Vec<Vec<f64>> = (0..64)
            .map(|_| (0..3).map(|_| rng.random_range(0.0..10.0)).collect())
            .collect();
        let set = feature_set(points);
        let a = kmeans_fit(&set, 6, 11, 40).unwrap();
        let b = kmeans_fit(&set, 6, 11, 40).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.pitv");
        let points = vec![vec![0.25, 1.5], vec![3.0, -2.0], vec![8.0, 8.0]];
        let vocab = kmeans_fit(&feature_set(points), 2, 3, 20).unwrap();
        write_vocabulary(&path, &vocab).unwrap();
        assert_eq!(read_vocabulary(&path).unwrap(), vocab);
    }
}
