//! The learned embedding head: affine -> rectifier -> affine -> ell-2
//! normalization. Parameters are stored as f32 (matching the model file);
//! all forward/backward arithmetic runs in f64.
//!
//! File layout (`.pitm`): magic `PITM`, u32 version (=1), u32 d_in, u32
//! hidden, u32 d_out, u32 nonlinearity tag (0 = rectifier), then w1
//! (hidden x d_in, row-major), b1, w2 (d_out x hidden, row-major), b2 as
//! little-endian f32.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::bev::BEVGrid;
use crate::cloud::{read_f32, read_u32};
use crate::error::{Error, Result};
use crate::seeds::rng_for;

use super::{bev_feature_vector, Descriptor};

pub const PITM_MAGIC: &[u8; 4] = b"PITM";
pub const PITM_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Relu,
}

impl Nonlinearity {
    fn tag(self) -> u32 {
        match self {
            Nonlinearity::Relu => 0,
        }
    }

    fn from_tag(tag: u32, path: &Path) -> Result<Self> {
        match tag {
            0 => Ok(Nonlinearity::Relu),
            other => Err(Error::malformed(
                path,
                format!("unknown nonlinearity tag {other}"),
            )),
        }
    }
}

/// One-hidden-layer embedding network.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub d_in: usize,
    pub hidden: usize,
    pub d_out: usize,
    /// hidden x d_in, row-major.
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    /// d_out x hidden, row-major.
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
    pub nonlinearity: Nonlinearity,
}

/// Cached intermediate values of one forward pass, consumed by backprop.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub input: Vec<f64>,
    pub hidden_pre: Vec<f64>,
    pub hidden: Vec<f64>,
    /// Pre-normalization output u.
    pub out_pre: Vec<f64>,
    pub out_norm: f64,
    /// Normalized output z = u / |u| (zeros when |u| vanishes).
    pub output: Vec<f64>,
}

/// Parameter gradients with the same shapes as the model, in f64.
#[derive(Debug, Clone)]
pub struct ModelGradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl ModelGradients {
    pub fn zeros(model: &EmbeddingModel) -> Self {
        ModelGradients {
            w1: vec![0.0; model.w1.len()],
            b1: vec![0.0; model.b1.len()],
            w2: vec![0.0; model.w2.len()],
            b2: vec![0.0; model.b2.len()],
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self
            .w1
            .iter_mut()
            .chain(&mut self.b1)
            .chain(&mut self.w2)
            .chain(&mut self.b2)
        {
            *g *= s;
        }
    }
}

impl EmbeddingModel {
    /// He-style random initialization, deterministic given the seed.
    pub fn random(d_in: usize, hidden: usize, d_out: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "model-init", 0);
        let s1 = (2.0 / d_in as f64).sqrt();
        let s2 = (2.0 / hidden as f64).sqrt();
        let mut sample = |scale: f64, n: usize| -> Vec<f32> {
            (0..n)
                .map(|_| (gaussian(&mut rng) * scale) as f32)
                .collect()
        };
        EmbeddingModel {
            d_in,
            hidden,
            d_out,
            w1: sample(s1, hidden * d_in),
            b1: vec![0.0; hidden],
            w2: sample(s2, d_out * hidden),
            b2: vec![0.0; d_out],
            nonlinearity: Nonlinearity::Relu,
        }
    }

    /// Square identity layers: forward reduces to relu(x) = x for the
    /// non-negative BEV features, so the descriptor is the normalized input.
    pub fn identity(d: usize) -> Self {
        let mut eye = vec![0.0f32; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        EmbeddingModel {
            d_in: d,
            hidden: d,
            d_out: d,
            w1: eye.clone(),
            b1: vec![0.0; d],
            w2: eye,
            b2: vec![0.0; d],
            nonlinearity: Nonlinearity::Relu,
        }
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn forward(&self, input: &[f64]) -> Result<ForwardPass> {
        if input.len() != self.d_in {
            return Err(Error::DimensionMismatch {
                expected: self.d_in,
                actual: input.len(),
            });
        }
        let mut hidden_pre = vec![0f64; self.hidden];
        for h in 0..self.hidden {
            let row = &self.w1[h * self.d_in..(h + 1) * self.d_in];
            let mut acc = self.b1[h] as f64;
            for (w, x) in row.iter().zip(input) {
                acc += *w as f64 * x;
            }
            hidden_pre[h] = acc;
        }
        let hidden: Vec<f64> = hidden_pre.iter().map(|&v| v.max(0.0)).collect();
        let mut out_pre = vec![0f64; self.d_out];
        for o in 0..self.d_out {
            let row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
            let mut acc = self.b2[o] as f64;
            for (w, x) in row.iter().zip(&hidden) {
                acc += *w as f64 * x;
            }
            out_pre[o] = acc;
        }
        let out_norm = out_pre.iter().map(|v| v * v).sum::<f64>().sqrt();
        let output = if out_norm > 1e-12 {
            out_pre.iter().map(|v| v / out_norm).collect()
        } else {
            vec![0.0; self.d_out]
        };
        Ok(ForwardPass {
            input: input.to_vec(),
            hidden_pre,
            hidden,
            out_pre,
            out_norm,
            output,
        })
    }

    /// Accumulate parameter gradients for one sample given dL/dz at the
    /// normalized output z. Chains through the normalization, the second
    /// affine layer, the rectifier and the first affine layer.
    pub fn backward(&self, pass: &ForwardPass, grad_output: &[f64], acc: &mut ModelGradients) {
        debug_assert_eq!(grad_output.len(), self.d_out);
        if pass.out_norm <= 1e-12 {
            // Subgradient choice at the degenerate point: zero.
            return;
        }
        // dL/du = (g - z (z . g)) / |u|
        let zdotg: f64 = pass
            .output
            .iter()
            .zip(grad_output)
            .map(|(z, g)| z * g)
            .sum();
        let grad_u: Vec<f64> = pass
            .output
            .iter()
            .zip(grad_output)
            .map(|(z, g)| (g - z * zdotg) / pass.out_norm)
            .collect();

        let mut grad_hidden = vec![0f64; self.hidden];
        for o in 0..self.d_out {
            let gu = grad_u[o];
            acc.b2[o] += gu;
            let row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
            let grow = &mut acc.w2[o * self.hidden..(o + 1) * self.hidden];
            for h in 0..self.hidden {
                grow[h] += gu * pass.hidden[h];
                grad_hidden[h] += gu * row[h] as f64;
            }
        }
        for h in 0..self.hidden {
            if pass.hidden_pre[h] <= 0.0 {
                continue;
            }
            let gp = grad_hidden[h];
            acc.b1[h] += gp;
            let grow = &mut acc.w1[h * self.d_in..(h + 1) * self.d_in];
            for (gw, x) in grow.iter_mut().zip(&pass.input) {
                *gw += gp * x;
            }
        }
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream layout simple.
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Embed a BEV grid: featurize, forward, normalize.
pub fn embed(grid: &BEVGrid, model: &EmbeddingModel) -> Result<Descriptor> {
    let features = bev_feature_vector(grid);
    embed_features(&features, model)
}

/// Embed a precomputed feature vector.
pub fn embed_features(features: &[f64], model: &EmbeddingModel) -> Result<Descriptor> {
    let pass = model.forward(features)?;
    if pass.out_norm <= 1e-12 {
        return Ok(Descriptor::invalid(model.d_out));
    }
    Ok(Descriptor::normalized(&pass.out_pre))
}

pub fn write_model(path: &Path, model: &EmbeddingModel) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(PITM_MAGIC).map_err(io)?;
    w.write_all(&PITM_VERSION.to_le_bytes()).map_err(io)?;
    for dim in [model.d_in, model.hidden, model.d_out] {
        w.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
    }
    w.write_all(&model.nonlinearity.tag().to_le_bytes()).map_err(io)?;
    for block in [&model.w1, &model.b1, &model.w2, &model.b2] {
        for &v in block.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_model(path: &Path) -> Result<EmbeddingModel> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != PITM_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "PITM",
        });
    }
    let version = read_u32(&mut r, path)?;
    if version != PITM_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: PITM_VERSION,
        });
    }
    let d_in = read_u32(&mut r, path)? as usize;
    let hidden = read_u32(&mut r, path)? as usize;
    let d_out = read_u32(&mut r, path)? as usize;
    let nonlinearity = Nonlinearity::from_tag(read_u32(&mut r, path)?, path)?;
    if d_in == 0 || hidden == 0 || d_out == 0 {
        return Err(Error::malformed(path, "zero layer size"));
    }
    let mut read_block = |n: usize| -> Result<Vec<f32>> {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(read_f32(&mut r, path)?);
        }
        Ok(v)
    };
    let w1 = read_block(hidden * d_in)?;
    let b1 = read_block(hidden)?;
    let w2 = read_block(d_out * hidden)?;
    let b2 = read_block(d_out)?;
    Ok(EmbeddingModel {
        d_in,
        hidden,
        d_out,
        w1,
        b1,
        w2,
        b2,
        nonlinearity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bev::{voxelize, GridSpec};
    use crate::cloud::{Point, PointCloud};

    fn sample_grid() -> BEVGrid {
        let spec = GridSpec::new(16.0, 16.0, 1.0, 4.0, 4, 0.0).unwrap();
        let cloud = PointCloud::new(vec![
            Point::new(4.5, -3.5, 2.5, 0.5),
            Point::new(0.5, 0.5, 1.5, 0.8),
            Point::new(-6.5, 2.5, 0.5, 0.2),
        ]);
        voxelize(&cloud, &spec)
    }

    #[test]
    fn identity_model_returns_normalized_features() {
        let grid = sample_grid();
        let features = bev_feature_vector(&grid);
        let model = EmbeddingModel::identity(features.len());
        let desc = embed(&grid, &model).unwrap();
        let expected = Descriptor::normalized(&features);
        assert_eq!(desc, expected);
    }

    #[test]
    fn zero_weight_model_outputs_normalized_bias() {
        let grid = sample_grid();
        let d_in = bev_feature_vector(&grid).len();
        let mut model = EmbeddingModel::random(d_in, 8, 4, 99);
        model.w2.iter_mut().for_each(|w| *w = 0.0);
        model.b2 = vec![1.0, 2.0, 2.0, 0.0];
        let desc = embed(&grid, &model).unwrap();
        let want = Descriptor::normalized(&[1.0, 2.0, 2.0, 0.0]);
        assert_eq!(desc, want);
    }

    #[test]
    fn forward_matches_independent_matrix_arithmetic() {
        let model = EmbeddingModel::random(5, 3, 4, 7);
        let input = [0.3, -1.2, 4.5, 0.0, 2.2];
        let pass = model.forward(&input).unwrap();

        // Straight-line re-computation.
        let mut hidden = [0f64; 3];
        for h in 0..3 {
            let mut acc = model.b1[h] as f64;
            for i in 0..5 {
                acc += model.w1[h * 5 + i] as f64 * input[i];
            }
            hidden[h] = acc.max(0.0);
        }
        let mut out = [0f64; 4];
        for o in 0..4 {
            let mut acc = model.b2[o] as f64;
            for h in 0..3 {
                acc += model.w2[o * 3 + h] as f64 * hidden[h];
            }
            out[o] = acc;
        }
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        for o in 0..4 {
            assert!((pass.output[o] - out[o] / norm).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let model = EmbeddingModel::random(5, 3, 4, 7);
        assert!(matches!(
            model.forward(&[1.0, 2.0]),
            Err(Error::DimensionMismatch { expected: 5, actual: 2 })
        ));
    }

    #[test]
    fn model_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.pitm");
        let model = EmbeddingModel::random(6, 4, 3, 21);
        write_model(&path, &model).unwrap();
        assert_eq!(read_model(&path).unwrap(), model);
    }

    #[test]
    fn backward_matches_finite_differences_through_network() {
        // Check dL/dparams for L = z . t (a fixed linear functional of the
        // normalized output) against central differences on each parameter.
        let model = EmbeddingModel::random(4, 5, 3, 13);
        let input = [1.0, -0.5, 2.0, 0.25];
        let target = [0.3, -0.7, 0.2];

        let loss = |m: &EmbeddingModel| -> f64 {
            let p = m.forward(&input).unwrap();
            p.output.iter().zip(target).map(|(z, t)| z * t).sum()
        };

        let pass = model.forward(&input).unwrap();
        let mut grads = ModelGradients::zeros(&model);
        model.backward(&pass, &target, &mut grads);

        let h = 1e-3f32;
        let mut check = |get: &dyn Fn(&EmbeddingModel) -> Vec<f32>,
                         set: &dyn Fn(&mut EmbeddingModel, usize, f32),
                         analytic: &[f64]| {
            let base = get(&model);
            for i in 0..base.len() {
                let mut plus = model.clone();
                set(&mut plus, i, base[i] + h);
                let mut minus = model.clone();
                set(&mut minus, i, base[i] - h);
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h as f64);
                assert!(
                    (fd - analytic[i]).abs() < 2e-3,
                    "param {i}: fd {fd} vs analytic {}",
                    analytic[i]
                );
            }
        };
        check(&|m| m.w1.clone(), &|m, i, v| m.w1[i] = v, &grads.w1);
        check(&|m| m.b1.clone(), &|m, i, v| m.b1[i] = v, &grads.b1);
        check(&|m| m.w2.clone(), &|m, i, v| m.w2[i] = v, &grads.w2);
        check(&|m| m.b2.clone(), &|m, i, v| m.b2[i] = v, &grads.b2);
    }
}
