//! Global descriptors: the currency of retrieval.
//!
//! Three extractors share the [`Descriptor`] output type: pooled BEV
//! statistics ([`bev_feature_vector`] normalized directly), a k-means
//! vocabulary with VLAD pooling over BEV patch features, and the learned
//! embedding head ([`EmbeddingModel`]).

mod kmeans;
mod model;
mod vlad;

pub use kmeans::{kmeans_fit, kmeans_fit_detailed, read_vocabulary, write_vocabulary, Vocabulary};
pub use model::{
    embed, embed_features, read_model, write_model, EmbeddingModel, ForwardPass, ModelGradients,
    Nonlinearity,
};
pub use vlad::{vlad_pool, LocalFeatureSet};

use crate::bev::BEVGrid;

/// A fixed-dimension, unit-norm embedding vector. Values are stored as f32
/// (the width used by every on-disk format); distance math runs in f64.
///
/// The zero vector is the "invalid" descriptor: it signals an extraction
/// that produced no usable signal (e.g. VLAD with all-zero residuals), and
/// such records are excluded from search.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    values: Vec<f32>,
    valid: bool,
}

impl Descriptor {
    /// Normalize a raw vector onto the unit sphere. Vectors with vanishing
    /// norm become the invalid zero descriptor.
    pub fn normalized(raw: &[f64]) -> Descriptor {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm < 1e-12 {
            return Descriptor {
                values: vec![0.0; raw.len()],
                valid: false,
            };
        }
        Descriptor {
            values: raw.iter().map(|v| (v / norm) as f32).collect(),
            valid: true,
        }
    }

    pub fn invalid(dim: usize) -> Descriptor {
        Descriptor {
            values: vec![0.0; dim],
            valid: false,
        }
    }

    /// Rebuild from stored f32 values (database load). Validity is derived:
    /// stored descriptors are either unit-norm or all-zero.
    pub fn from_stored(values: Vec<f32>) -> Descriptor {
        let norm: f64 = values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        Descriptor {
            valid: norm > 0.5,
            values,
        }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_valid(&self) -> bool {
        self.valid
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    /// Euclidean distance, accumulated in f64.
    pub fn distance(&self, other: &Descriptor) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn values_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

/// Fixed featurization of a BEV grid, feeding the embedding head.
///
/// Concatenates, in order: per-channel occupancy sums (c values),
/// per-channel mean intensity over occupied voxels (c values), then coarse
/// occupancy pyramids over the (x, y) plane pooled to 4x4 and 8x8 tiles
/// (16 + 64 values). Total dimension `2c + 80`.
pub fn bev_feature_vector(grid: &BEVGrid) -> Vec<f64> {
    let spec = &grid.spec;
    let (lx, ly, c) = (spec.cells_x(), spec.cells_y(), spec.channels);
    let mut occ_sum = vec![0f64; c];
    let mut int_sum = vec![0f64; c];
    let mut occupied_cells = vec![0u64; c];
    let mut tiles4 = vec![0f64; 16];
    let mut tiles8 = vec![0f64; 64];

    for ix in 0..lx {
        let t4x = ix * 4 / lx;
        let t8x = ix * 8 / lx;
        for iy in 0..ly {
            let t4 = t4x * 4 + iy * 4 / ly;
            let t8 = t8x * 8 + iy * 8 / ly;
            for ch in 0..c {
                let occ = grid.occupancy(ix, iy, ch);
                if occ > 0 {
                    occ_sum[ch] += occ as f64;
                    int_sum[ch] += grid.mean_intensity(ix, iy, ch);
                    occupied_cells[ch] += 1;
                    tiles4[t4] += occ as f64;
                    tiles8[t8] += occ as f64;
                }
            }
        }
    }

    let mut out = Vec::with_capacity(2 * c + 80);
    out.extend_from_slice(&occ_sum);
    for ch in 0..c {
        out.push(if occupied_cells[ch] == 0 {
            0.0
        } else {
            int_sum[ch] / occupied_cells[ch] as f64
        });
    }
    out.extend_from_slice(&tiles4);
    out.extend_from_slice(&tiles8);
    out
}

/// Dimension of [`bev_feature_vector`] for a grid with `channels` channels.
pub fn bev_feature_dim(channels: usize) -> usize {
    2 * channels + 80
}

/// Local features for VLAD pooling: the grid is split into 8x8-cell
/// patches; each non-empty patch yields the 64 per-cell channel-summed
/// occupancy counts (partial edge patches are zero-padded).
pub fn bev_local_features(grid: &BEVGrid) -> LocalFeatureSet {
    let spec = &grid.spec;
    let (lx, ly, c) = (spec.cells_x(), spec.cells_y(), spec.channels);
    let px = lx.div_ceil(8);
    let py = ly.div_ceil(8);
    let mut features = Vec::new();
    for tx in 0..px {
        for ty in 0..py {
            let mut patch = vec![0f64; 64];
            let mut any = false;
            for dx in 0..8 {
                let ix = tx * 8 + dx;
                if ix >= lx {
                    break;
                }
                for dy in 0..8 {
                    let iy = ty * 8 + dy;
                    if iy >= ly {
                        break;
                    }
                    let mut count = 0u64;
                    for ch in 0..c {
                        count += grid.occupancy(ix, iy, ch) as u64;
                    }
                    if count > 0 {
                        any = true;
                        patch[dx * 8 + dy] = count as f64;
                    }
                }
            }
            if any {
                features.push(patch);
            }
        }
    }
    LocalFeatureSet::new(features, 64)
}
