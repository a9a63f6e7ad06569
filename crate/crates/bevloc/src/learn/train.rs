//! The metric-learning training loop: minibatch hinge losses over mined
//! tuples, Adam updates, a hard-negative cache refreshed on a fixed
//! interval, and learning-rate decay when validation recall@1m plateaus.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::descriptor::{EmbeddingModel, ForwardPass, ModelGradients};
use crate::error::{Error, Result};
use crate::geom::{geo_distance, Pose};
use crate::seeds::rng_for;

use super::cache::{refresh_negative_cache, select_hard_negative, NegativeCache};
use super::loss::{lazy_quadruplet_loss_raw, triplet_loss_raw};
use super::mining::{MiningRules, PoseTable};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchMode {
    /// Each batch item is one (anchor, positive, negative) triplet.
    Triplet { size: usize },
    /// Each batch is one anchor with `positives` positives and `negatives`
    /// negatives plus a sampled decoy.
    Quadruplet { positives: usize, negatives: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Learning rate is divided by this on plateau.
    pub plateau_decay: f64,
    pub batch: BatchMode,
    pub cache_refresh_interval: u64,
    pub max_iterations: u64,
    pub seed: u64,
    /// Evaluations without improvement before the rate decays.
    pub patience: u32,
    /// Improvement threshold in percentage points of recall@1m.
    pub min_improvement_pp: f64,
    /// Second margin (beta) of the lazy quadruplet loss.
    pub quadruplet_beta: f64,
    /// Validation queries are capped at this count (sampled by seed).
    pub val_query_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            plateau_decay: 10.0,
            batch: BatchMode::Triplet { size: 16 },
            cache_refresh_interval: 1000,
            max_iterations: 4000,
            seed: 0,
            patience: 3,
            min_improvement_pp: 0.1,
            quadruplet_beta: 0.25,
            val_query_cap: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) {
            return Err(Error::InvalidParameter("learning rate must be >= 0".into()));
        }
        if self.cache_refresh_interval == 0 {
            return Err(Error::InvalidParameter(
                "cache refresh interval must be >= 1".into(),
            ));
        }
        if !(self.plateau_decay > 1.0) {
            return Err(Error::InvalidParameter("plateau decay must exceed 1".into()));
        }
        match self.batch {
            BatchMode::Triplet { size } if size == 0 => {
                Err(Error::InvalidParameter("batch size must be >= 1".into()))
            }
            BatchMode::Quadruplet { positives, negatives } if positives == 0 || negatives == 0 => {
                Err(Error::InvalidParameter(
                    "quadruplet batches need >= 1 positive and negative".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

/// Features and poses for the train and validation trip splits. Feature
/// vectors are aligned 1:1 with the pose slices.
#[derive(Debug, Clone)]
pub struct TrainDataset {
    pub train_poses: Vec<Pose>,
    pub train_features: Vec<Vec<f64>>,
    pub val_poses: Vec<Pose>,
    pub val_features: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub iteration: u64,
    /// Mean batch loss since the previous log row.
    pub loss: f64,
    /// Percent of validation queries whose nearest train embedding lies
    /// within 1 m.
    pub val_recall_1m: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
    pub skipped_items: u64,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(param_count: usize) -> Self {
        Adam {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    fn step(&mut self, model: &mut EmbeddingModel, grads: &ModelGradients, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let mut offset = 0usize;
        let blocks: [(&mut Vec<f32>, &Vec<f64>); 4] = [
            (&mut model.w1, &grads.w1),
            (&mut model.b1, &grads.b1),
            (&mut model.w2, &grads.w2),
            (&mut model.b2, &grads.b2),
        ];
        for (params, block_grads) in blocks {
            for (p, &g) in params.iter_mut().zip(block_grads.iter()) {
                let m = &mut self.m[offset];
                let v = &mut self.v[offset];
                offset += 1;
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                let update = lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                *p = (*p as f64 - update) as f32;
            }
        }
    }
}

/// Train the embedding head. Deterministic given (dataset, rules, config):
/// all sampling uses seed-derived streams and parallel sections are
/// order-preserving.
pub fn train(
    model: &EmbeddingModel,
    dataset: &TrainDataset,
    rules: &MiningRules,
    config: &TrainConfig,
) -> Result<(EmbeddingModel, TrainLog)> {
    rules.validate()?;
    config.validate()?;
    assert_eq!(dataset.train_poses.len(), dataset.train_features.len());
    assert_eq!(dataset.val_poses.len(), dataset.val_features.len());

    let mut log = TrainLog::default();
    if config.max_iterations == 0 {
        return Ok((model.clone(), log));
    }

    let mut model = model.clone();
    let table = PoseTable::for_rules(dataset.train_poses.clone(), rules);
    let val_indices = sample_indices(dataset.val_poses.len(), config.val_query_cap, config.seed);

    let mut adam = Adam::new(model.param_count());
    let mut rng = rng_for(config.seed, "train-mine", 0);
    let mut cache = NegativeCache::empty();
    let mut lr = config.learning_rate;
    let mut best_recall = f64::NEG_INFINITY;
    let mut stale_evals = 0u32;
    let mut interval_loss_sum = 0.0;
    let mut interval_loss_count = 0u64;

    for iteration in 0..config.max_iterations {
        if iteration % config.cache_refresh_interval == 0 {
            cache = refresh_negative_cache(&model, &dataset.train_features)?;
            let recall = validation_recall_1m(&model, dataset, &val_indices, &cache)?;
            if iteration > 0 {
                if recall >= best_recall + config.min_improvement_pp {
                    best_recall = recall;
                    stale_evals = 0;
                } else {
                    stale_evals += 1;
                    if stale_evals >= config.patience {
                        lr /= config.plateau_decay;
                        stale_evals = 0;
                    }
                }
            } else {
                best_recall = recall;
            }
            let loss = if interval_loss_count == 0 {
                0.0
            } else {
                interval_loss_sum / interval_loss_count as f64
            };
            interval_loss_sum = 0.0;
            interval_loss_count = 0;
            log.rows.push(TrainLogRow {
                iteration,
                loss,
                val_recall_1m: recall,
                learning_rate: lr,
            });
        }

        let mut grads = ModelGradients::zeros(&model);
        let mut batch_loss = 0.0;
        let mut items = 0usize;
        match config.batch {
            BatchMode::Triplet { size } => {
                for _ in 0..size {
                    match mine_triplet_item(&table, rules, &cache, &mut rng) {
                        Some((a, p, n)) => {
                            if let Some(loss) = accumulate_triplet(
                                &model,
                                dataset,
                                (a, p, n),
                                rules.margin,
                                &mut grads,
                            )? {
                                batch_loss += loss;
                                items += 1;
                            } else {
                                log.skipped_items += 1;
                            }
                        }
                        None => log.skipped_items += 1,
                    }
                }
            }
            BatchMode::Quadruplet { positives, negatives } => {
                match mine_quadruplet_item(&table, rules, &cache, positives, negatives, &mut rng) {
                    Some(batch) => {
                        if let Some(loss) = accumulate_quadruplet(
                            &model,
                            dataset,
                            &batch,
                            (rules.margin, config.quadruplet_beta),
                            &mut grads,
                        )? {
                            batch_loss += loss;
                            items += 1;
                        } else {
                            log.skipped_items += 1;
                        }
                    }
                    None => log.skipped_items += 1,
                }
            }
        }

        if items == 0 {
            continue;
        }
        let mean_loss = batch_loss / items as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Divergence { iteration });
        }
        grads.scale(1.0 / items as f64);
        adam.step(&mut model, &grads, lr);
        interval_loss_sum += mean_loss;
        interval_loss_count += 1;
    }

    // Closing evaluation so the log always ends with the final model state.
    cache = refresh_negative_cache(&model, &dataset.train_features)?;
    let recall = validation_recall_1m(&model, dataset, &val_indices, &cache)?;
    let loss = if interval_loss_count == 0 {
        0.0
    } else {
        interval_loss_sum / interval_loss_count as f64
    };
    log.rows.push(TrainLogRow {
        iteration: config.max_iterations,
        loss,
        val_recall_1m: recall,
        learning_rate: lr,
    });

    Ok((model, log))
}

struct QuadrupletItem {
    anchor: usize,
    positives: Vec<usize>,
    negatives: Vec<usize>,
    decoy: usize,
}

fn mine_triplet_item(
    table: &PoseTable,
    rules: &MiningRules,
    cache: &NegativeCache,
    rng: &mut impl Rng,
) -> Option<(usize, usize, usize)> {
    if table.is_empty() {
        return None;
    }
    let anchor = rng.random_range(0..table.len());
    let anchor_pose = &table.poses()[anchor];
    let positives = table.positive_candidates(anchor_pose, rules);
    if positives.is_empty() {
        return None;
    }
    let negatives = table.negative_candidates(anchor_pose, rules);
    if negatives.is_empty() {
        return None;
    }
    let p = positives[rng.random_range(0..positives.len())];
    let n = select_hard_negative(cache, anchor, &negatives)
        .unwrap_or_else(|| negatives[rng.random_range(0..negatives.len())]);
    Some((anchor, p, n))
}

fn mine_quadruplet_item(
    table: &PoseTable,
    rules: &MiningRules,
    cache: &NegativeCache,
    n_positives: usize,
    n_negatives: usize,
    rng: &mut impl Rng,
) -> Option<QuadrupletItem> {
    if table.is_empty() {
        return None;
    }
    let anchor = rng.random_range(0..table.len());
    let anchor_pose = &table.poses()[anchor];
    let mut positives = table.positive_candidates(anchor_pose, rules);
    if positives.is_empty() {
        return None;
    }
    let negative_pool = table.negative_candidates(anchor_pose, rules);
    if negative_pool.is_empty() {
        return None;
    }

    partial_shuffle(&mut positives, n_positives, rng);
    positives.truncate(n_positives);

    let negatives = if cache.is_empty() {
        let mut pool = negative_pool.clone();
        partial_shuffle(&mut pool, n_negatives, rng);
        pool.truncate(n_negatives);
        pool
    } else {
        // Hardest negatives: nearest the anchor in cached embedding space.
        let anchor_desc = cache.descriptor(anchor);
        let mut scored: Vec<(f64, usize)> = negative_pool
            .iter()
            .map(|&i| (cache.descriptor(i).distance(anchor_desc), i))
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        scored.truncate(n_negatives);
        scored.into_iter().map(|(_, i)| i).collect()
    };

    // Decoy: uniform reading geo-distant from every batch negative.
    let poses = table.poses();
    let mut decoy = None;
    for _ in 0..100 {
        let c = rng.random_range(0..table.len());
        let far = negatives
            .iter()
            .all(|&n| geo_distance(&poses[c], &poses[n]) > rules.negative_max);
        if far && c != anchor {
            decoy = Some(c);
            break;
        }
    }
    Some(QuadrupletItem {
        anchor,
        positives,
        negatives,
        decoy: decoy?,
    })
}

/// First-k Fisher-Yates; only the prefix order matters.
fn partial_shuffle(items: &mut [usize], k: usize, rng: &mut impl Rng) {
    let n = items.len();
    for i in 0..k.min(n.saturating_sub(1)) {
        let j = rng.random_range(i..n);
        items.swap(i, j);
    }
}

fn forward_or_skip(
    model: &EmbeddingModel,
    features: &[f64],
) -> Result<Option<ForwardPass>> {
    let pass = model.forward(features)?;
    if pass.out_norm <= 1e-12 {
        return Ok(None);
    }
    Ok(Some(pass))
}

fn accumulate_triplet(
    model: &EmbeddingModel,
    dataset: &TrainDataset,
    (a, p, n): (usize, usize, usize),
    margin: f64,
    grads: &mut ModelGradients,
) -> Result<Option<f64>> {
    let (Some(pa), Some(pp), Some(pn)) = (
        forward_or_skip(model, &dataset.train_features[a])?,
        forward_or_skip(model, &dataset.train_features[p])?,
        forward_or_skip(model, &dataset.train_features[n])?,
    ) else {
        return Ok(None);
    };
    let (loss, g) = triplet_loss_raw(&pa.output, &pp.output, &pn.output, margin);
    model.backward(&pa, &g.anchor, grads);
    model.backward(&pp, &g.positive, grads);
    model.backward(&pn, &g.negative, grads);
    Ok(Some(loss))
}

fn accumulate_quadruplet(
    model: &EmbeddingModel,
    dataset: &TrainDataset,
    item: &QuadrupletItem,
    margins: (f64, f64),
    grads: &mut ModelGradients,
) -> Result<Option<f64>> {
    let Some(pa) = forward_or_skip(model, &dataset.train_features[item.anchor])? else {
        return Ok(None);
    };
    let Some(pd) = forward_or_skip(model, &dataset.train_features[item.decoy])? else {
        return Ok(None);
    };
    let mut pos_passes = Vec::with_capacity(item.positives.len());
    for &i in &item.positives {
        match forward_or_skip(model, &dataset.train_features[i])? {
            Some(p) => pos_passes.push(p),
            None => return Ok(None),
        }
    }
    let mut neg_passes = Vec::with_capacity(item.negatives.len());
    for &i in &item.negatives {
        match forward_or_skip(model, &dataset.train_features[i])? {
            Some(p) => neg_passes.push(p),
            None => return Ok(None),
        }
    }

    let pos_out: Vec<&[f64]> = pos_passes.iter().map(|p| p.output.as_slice()).collect();
    let neg_out: Vec<&[f64]> = neg_passes.iter().map(|p| p.output.as_slice()).collect();
    let (loss, g) =
        lazy_quadruplet_loss_raw(&pa.output, &pos_out, &neg_out, &pd.output, margins)?;
    model.backward(&pa, &g.anchor, grads);
    model.backward(&pd, &g.decoy, grads);
    for (pass, grad) in pos_passes.iter().zip(&g.positives) {
        model.backward(pass, grad, grads);
    }
    for (pass, grad) in neg_passes.iter().zip(&g.negatives) {
        model.backward(pass, grad, grads);
    }
    Ok(Some(loss))
}

fn sample_indices(n: usize, cap: usize, seed: u64) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut rng = rng_for(seed, "val-sample", 0);
    let mut all: Vec<usize> = (0..n).collect();
    partial_shuffle(&mut all, cap, &mut rng);
    all.truncate(cap);
    all.sort_unstable();
    all
}

/// Percent of validation queries whose nearest train-pool embedding (under
/// the cached snapshot) lies within 1 m of the query's true pose.
fn validation_recall_1m(
    model: &EmbeddingModel,
    dataset: &TrainDataset,
    val_indices: &[usize],
    cache: &NegativeCache,
) -> Result<f64> {
    if val_indices.is_empty() || cache.is_empty() {
        return Ok(0.0);
    }
    let query_descs = val_indices
        .par_iter()
        .map(|&i| crate::descriptor::embed_features(&dataset.val_features[i], model))
        .collect::<Result<Vec<_>>>()?;
    let mut correct = 0usize;
    for (slot, &vi) in val_indices.iter().enumerate() {
        let q = &query_descs[slot];
        if !q.is_valid() {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for (ti, d) in cache.descriptors().iter().enumerate() {
            if !d.is_valid() {
                continue;
            }
            let dist = d.distance(q);
            if best.map_or(true, |(bd, _)| dist < bd) {
                best = Some((dist, ti));
            }
        }
        if let Some((_, ti)) = best {
            if geo_distance(&dataset.val_poses[vi], &dataset.train_poses[ti]) <= 1.0 {
                correct += 1;
            }
        }
    }
    Ok(100.0 * correct as f64 / val_indices.len() as f64)
}

const TRAIN_LOG_HEADER: &str = "iteration,loss,val_recall_1m,learning_rate";

pub fn write_train_log(path: &Path, log: &TrainLog) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{TRAIN_LOG_HEADER}").expect("in-memory write");
    for row in &log.rows {
        writeln!(
            out,
            "{},{},{},{}",
            row.iteration, row.loss, row.val_recall_1m, row.learning_rate
        )
        .expect("in-memory write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_train_log(path: &Path) -> Result<Vec<TrainLogRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == TRAIN_LOG_HEADER => {}
        _ => return Err(Error::malformed(path, "bad train log header")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::MalformedRecord {
                path: path.to_path_buf(),
                line: i + 2,
                detail: "expected 4 fields".into(),
            });
        }
        let parse_err = |detail: String| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: i + 2,
            detail,
        };
        rows.push(TrainLogRow {
            iteration: parts[0].parse().map_err(|_| parse_err("bad iteration".into()))?,
            loss: parts[1].parse().map_err(|_| parse_err("bad loss".into()))?,
            val_recall_1m: parts[2].parse().map_err(|_| parse_err("bad recall".into()))?,
            learning_rate: parts[3].parse().map_err(|_| parse_err("bad rate".into()))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Trains 0/1 and a validation trip run the same 60 m line slightly out
    /// of phase. Features carry the position plus a large per-trip nuisance
    /// channel, so an untrained metric groups readings by trip while a
    /// learned reweighting recovers position.
    fn toy_dataset() -> TrainDataset {
        let mut train_poses = Vec::new();
        let mut train_features = Vec::new();
        let mut val_poses = Vec::new();
        let mut val_features = Vec::new();
        let mut rng = rng_for(1, "toy-data", 0);
        for trip in 0..3u64 {
            let phase = trip as f64 * 0.3;
            let nuisance = match trip {
                0 => [30.0, 0.0],
                1 => [0.0, 30.0],
                _ => [28.0, 4.0], // validation: near trip 0's weather, new positions
            };
            for i in 0..60 {
                let x = i as f64 + phase;
                let pose = Pose::new(x, 0.0, 0.0, trip, i as f64, trip * 1000 + i);
                let noise: f64 = rng.random_range(-0.05..0.05);
                let features = vec![
                    (x + noise) * 0.2,
                    ((x * 0.37).sin() + 1.0) * 2.0,
                    nuisance[0] + rng.random_range(-1.0..1.0),
                    nuisance[1] + rng.random_range(-1.0..1.0),
                ];
                if trip < 2 {
                    train_poses.push(pose);
                    train_features.push(features);
                } else {
                    val_poses.push(pose);
                    val_features.push(features);
                }
            }
        }
        TrainDataset {
            train_poses,
            train_features,
            val_poses,
            val_features,
        }
    }

    #[test]
    fn zero_learning_rate_leaves_model_unchanged() {
        let dataset = toy_dataset();
        let model = EmbeddingModel::random(4, 8, 4, 5);
        let config = TrainConfig {
            learning_rate: 0.0,
            max_iterations: 40,
            cache_refresh_interval: 20,
            ..TrainConfig::default()
        };
        let (trained, log) = train(&model, &dataset, &MiningRules::default(), &config).unwrap();
        assert_eq!(trained, model);
        assert!(!log.rows.is_empty());
    }

    #[test]
    fn zero_iterations_returns_input_with_empty_log() {
        let dataset = toy_dataset();
        let model = EmbeddingModel::random(4, 8, 4, 5);
        let config = TrainConfig {
            max_iterations: 0,
            ..TrainConfig::default()
        };
        let (trained, log) = train(&model, &dataset, &MiningRules::default(), &config).unwrap();
        assert_eq!(trained, model);
        assert!(log.rows.is_empty());
    }

    #[test]
    fn training_improves_validation_recall_on_toy_world() {
        let dataset = toy_dataset();
        let model = EmbeddingModel::random(4, 16, 8, 7);
        let config = TrainConfig {
            max_iterations: 2000,
            cache_refresh_interval: 500,
            ..TrainConfig::default()
        };
        let (_, log) = train(&model, &dataset, &MiningRules::default(), &config).unwrap();
        let first = log.rows.first().unwrap().val_recall_1m;
        let last = log.rows.last().unwrap().val_recall_1m;
        assert!(
            last >= first,
            "recall should not degrade: {first} -> {last}"
        );
        assert!(last > 20.0, "trained recall too weak: {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let dataset = toy_dataset();
        let model = EmbeddingModel::random(4, 8, 4, 9);
        let config = TrainConfig {
            max_iterations: 120,
            cache_refresh_interval: 60,
            ..TrainConfig::default()
        };
        let (m1, l1) = train(&model, &dataset, &MiningRules::default(), &config).unwrap();
        let (m2, l2) = train(&model, &dataset, &MiningRules::default(), &config).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(l1.rows, l2.rows);
    }

    #[test]
    fn quadruplet_mode_trains() {
        let dataset = toy_dataset();
        let model = EmbeddingModel::random(4, 8, 4, 11);
        let config = TrainConfig {
            max_iterations: 60,
            cache_refresh_interval: 30,
            batch: BatchMode::Quadruplet { positives: 2, negatives: 18 },
            ..TrainConfig::default()
        };
        let (trained, log) = train(&model, &dataset, &MiningRules::default(), &config).unwrap();
        assert_ne!(trained, model);
        assert!(log.rows.len() >= 2);
    }

    #[test]
    fn train_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let log = TrainLog {
            rows: vec![
                TrainLogRow { iteration: 0, loss: 0.0, val_recall_1m: 1.5, learning_rate: 0.001 },
                TrainLogRow { iteration: 1000, loss: 0.25, val_recall_1m: 40.0, learning_rate: 0.0001 },
            ],
            skipped_items: 3,
        };
        write_train_log(&path, &log).unwrap();
        assert_eq!(read_train_log(&path).unwrap(), log.rows);
    }
}
