//! Evaluation protocols: trip-level splits, the percent-correct-within-
//! distance curve with mean/median error, and recall@1 / recall@1% at a
//! correctness radius over ranked retrieval lists.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::geom::{geo_distance, planar_distance, GpsFix, Pose};
use crate::index::{Database, RetrievalHit};
use crate::seeds::rng_for;

/// Disjoint trip partitions plus the sampled query readings.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSplit {
    pub train_trips: Vec<u64>,
    pub val_trips: Vec<u64>,
    pub test_trips: Vec<u64>,
    pub query_ids: Vec<u64>,
}

impl EvalSplit {
    pub fn database_trips(&self) -> Vec<u64> {
        let mut trips = self.train_trips.clone();
        trips.extend_from_slice(&self.val_trips);
        trips
    }
}

/// Shuffle trips by seed and partition by ratio; sample `query_count`
/// readings uniformly from the test trips. Partition sizes round to the
/// nearest trip with at least one trip per partition.
pub fn make_split(
    poses: &[Pose],
    train_pct: f64,
    val_pct: f64,
    query_count: usize,
    seed: u64,
) -> Result<EvalSplit> {
    if !(train_pct > 0.0 && val_pct > 0.0 && train_pct + val_pct < 100.0) {
        return Err(Error::InvalidParameter(
            "split percentages must be positive and sum below 100".into(),
        ));
    }
    let mut trips: Vec<u64> = {
        let mut t: Vec<u64> = poses.iter().map(|p| p.trip_id).collect();
        t.sort_unstable();
        t.dedup();
        t
    };
    if trips.len() < 3 {
        return Err(Error::InvalidParameter(format!(
            "need at least 3 trips to split, have {}",
            trips.len()
        )));
    }
    let mut rng = rng_for(seed, "split-trips", 0);
    for i in (1..trips.len()).rev() {
        trips.swap(i, rng.random_range(0..=i));
    }
    let n = trips.len();
    let n_train = ((n as f64 * train_pct / 100.0).round() as usize).clamp(1, n - 2);
    let n_val = ((n as f64 * val_pct / 100.0).round() as usize).clamp(1, n - n_train - 1);
    let train_trips = trips[..n_train].to_vec();
    let val_trips = trips[n_train..n_train + n_val].to_vec();
    let test_trips = trips[n_train + n_val..].to_vec();

    let mut test_readings: Vec<u64> = poses
        .iter()
        .filter(|p| test_trips.contains(&p.trip_id))
        .map(|p| p.reading_id)
        .collect();
    test_readings.sort_unstable();
    let mut query_rng = rng_for(seed, "split-queries", 0);
    let take = query_count.min(test_readings.len());
    for i in 0..take.min(test_readings.len().saturating_sub(1)) {
        let j = query_rng.random_range(i..test_readings.len());
        test_readings.swap(i, j);
    }
    test_readings.truncate(take);
    test_readings.sort_unstable();

    Ok(EvalSplit {
        train_trips,
        val_trips,
        test_trips,
        query_ids: test_readings,
    })
}

/// Percent of errors at or below each threshold. Thresholds must ascend;
/// infinite errors never count.
pub fn within_distance_curve(errors: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(Error::EmptyInput("within_distance_curve needs errors"));
    }
    for w in thresholds.windows(2) {
        if w[0] > w[1] {
            return Err(Error::InvalidParameter(
                "thresholds must be sorted ascending".into(),
            ));
        }
    }
    let n = errors.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| 100.0 * errors.iter().filter(|&&e| e <= t).count() as f64 / n)
        .collect())
}

/// Arithmetic mean and the lower-middle median (even counts take the lower
/// of the two central elements).
pub fn error_stats(errors: &[f64]) -> Result<(f64, f64)> {
    if errors.is_empty() {
        return Err(Error::EmptyInput("error_stats needs errors"));
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[(sorted.len() - 1) / 2];
    Ok((mean, median))
}

/// One evaluated query: its ranked hits against the database.
#[derive(Debug, Clone)]
pub struct RankedQuery {
    pub query_id: u64,
    pub true_pose: Pose,
    pub hits: Vec<RetrievalHit>,
}

/// Oxford-style recalls: the fraction of queries whose top hit is within
/// `correct_radius`, and the fraction with any correct hit in the top
/// ceil(db_size / 100).
pub fn recall_topk(
    queries: &[RankedQuery],
    correct_radius_m: f64,
    db_size: usize,
) -> Result<(f64, f64)> {
    if queries.is_empty() {
        return Err(Error::EmptyInput("recall_topk needs queries"));
    }
    let depth = top_one_percent_depth(db_size);
    let mut top1 = 0usize;
    let mut top_pct = 0usize;
    for q in queries {
        if let Some(first) = q.hits.first() {
            if geo_distance(&first.predicted_pose, &q.true_pose) <= correct_radius_m {
                top1 += 1;
            }
        }
        if q.hits
            .iter()
            .take(depth)
            .any(|h| geo_distance(&h.predicted_pose, &q.true_pose) <= correct_radius_m)
        {
            top_pct += 1;
        }
    }
    let n = queries.len() as f64;
    Ok((100.0 * top1 as f64 / n, 100.0 * top_pct as f64 / n))
}

/// ceil(db_size / 100), and at least 1.
pub fn top_one_percent_depth(db_size: usize) -> usize {
    db_size.div_ceil(100).max(1)
}

/// How a method answers one query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalMethod {
    /// Predict the GPS fix itself.
    GpsOnly,
    /// Exhaustive nearest-neighbour retrieval.
    Exhaustive,
    /// Retrieval restricted to records within tau metres of the GPS fix.
    GpsRestricted { tau_m: f64 },
}

/// One query to evaluate. `descriptor` may be None only for [`EvalMethod::GpsOnly`].
#[derive(Debug, Clone)]
pub struct EvalQuery {
    pub reading_id: u64,
    pub true_pose: Pose,
    pub gps: GpsFix,
    pub descriptor: Option<Descriptor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub query_id: u64,
    pub predicted: Option<Pose>,
    pub error_m: f64,
    pub gps_error_m: f64,
    /// 1-based rank of the first hit within the correctness radius, within
    /// the top-1% depth; 0 when absent.
    pub rank_of_nearest_true: usize,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_query: Vec<QueryResult>,
    /// (threshold_m, percent correct).
    pub curve: Vec<(f64, f64)>,
    pub mean_error_m: f64,
    pub median_error_m: f64,
    pub recall_at_1: f64,
    pub recall_at_1pct: f64,
    /// Queries with no candidates under GPS restriction (scored as +inf).
    pub no_candidate_queries: usize,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub method: EvalMethod,
    pub thresholds_m: Vec<f64>,
    pub correct_radius_m: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            method: EvalMethod::Exhaustive,
            thresholds_m: vec![0.25, 0.5, 1.0, 5.0],
            correct_radius_m: 25.0,
        }
    }
}

/// Evaluate every query against the database. Queries with no candidates
/// under GPS restriction score +inf (they count as incorrect at every
/// threshold rather than being dropped, keeping curves comparable across
/// tau). Deterministic: results are assembled in query order.
pub fn run_benchmark(
    db: &Database,
    queries: &[EvalQuery],
    config: &EvalConfig,
) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::EmptyInput("run_benchmark needs queries"));
    }
    let depth = top_one_percent_depth(db.len());

    let evaluated: Vec<(QueryResult, RankedQuery)> = queries
        .par_iter()
        .map(|q| evaluate_query(db, q, config, depth))
        .collect::<Result<Vec<_>>>()?;

    let (per_query, ranked): (Vec<QueryResult>, Vec<RankedQuery>) =
        evaluated.into_iter().unzip();

    let errors: Vec<f64> = per_query.iter().map(|r| r.error_m).collect();
    let curve_percents = within_distance_curve(&errors, &config.thresholds_m)?;
    let (mean, median) = error_stats(&errors)?;
    let (recall_at_1, recall_at_1pct) = recall_topk(&ranked, config.correct_radius_m, db.len())?;

    Ok(EvalReport {
        no_candidate_queries: per_query.iter().filter(|r| r.predicted.is_none()).count(),
        per_query,
        curve: config
            .thresholds_m
            .iter()
            .copied()
            .zip(curve_percents)
            .collect(),
        mean_error_m: mean,
        median_error_m: median,
        recall_at_1,
        recall_at_1pct,
    })
}

fn evaluate_query(
    db: &Database,
    q: &EvalQuery,
    config: &EvalConfig,
    depth: usize,
) -> Result<(QueryResult, RankedQuery)> {
    let gps_error = planar_distance(q.gps.x, q.gps.y, q.true_pose.x, q.true_pose.y);
    let hits: Vec<RetrievalHit> = match config.method {
        EvalMethod::GpsOnly => {
            let predicted = Pose::new(q.gps.x, q.gps.y, 0.0, 0, 0.0, 0);
            vec![RetrievalHit {
                record_index: usize::MAX,
                reading_id: 0,
                embedding_distance: 0.0,
                predicted_pose: predicted,
            }]
        }
        EvalMethod::Exhaustive => {
            let desc = q.descriptor.as_ref().ok_or(Error::EmptyDescriptor)?;
            db.query_knn(desc, depth)?
        }
        EvalMethod::GpsRestricted { tau_m } => {
            let desc = q.descriptor.as_ref().ok_or(Error::EmptyDescriptor)?;
            match db.query_gps(desc, &q.gps, tau_m, depth) {
                Ok(hits) => hits,
                Err(Error::NoCandidatesWithinTau) => Vec::new(),
                Err(e) => return Err(e),
            }
        }
    };

    let predicted = hits.first().map(|h| h.predicted_pose);
    let error_m = predicted
        .map(|p| geo_distance(&p, &q.true_pose))
        .unwrap_or(f64::INFINITY);
    let rank = hits
        .iter()
        .take(depth)
        .position(|h| geo_distance(&h.predicted_pose, &q.true_pose) <= config.correct_radius_m)
        .map(|i| i + 1)
        .unwrap_or(0);

    Ok((
        QueryResult {
            query_id: q.reading_id,
            predicted,
            error_m,
            gps_error_m: gps_error,
            rank_of_nearest_true: rank,
        },
        RankedQuery {
            query_id: q.reading_id,
            true_pose: q.true_pose,
            hits,
        },
    ))
}

const REPORT_HEADER: &str = "query_id,error_m,gps_error_m,rank_of_nearest_true";

pub fn write_report_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{REPORT_HEADER}").expect("in-memory write");
    for r in &report.per_query {
        writeln!(
            out,
            "{},{},{},{}",
            r.query_id, r.error_m, r.gps_error_m, r.rank_of_nearest_true
        )
        .expect("in-memory write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Rows of `report.csv`: (query_id, error_m, gps_error_m, rank).
pub fn read_report_csv(path: &Path) -> Result<Vec<(u64, f64, f64, usize)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == REPORT_HEADER => {}
        _ => return Err(Error::malformed(path, "bad report header")),
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
        let err = |what: &str| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: i + 2,
            detail: format!("cannot parse {what}"),
        };
        rows.push((
            parts[0].parse().map_err(|_| err("query_id"))?,
            parts[1].parse().map_err(|_| err("error_m"))?,
            parts[2].parse().map_err(|_| err("gps_error_m"))?,
            parts[3].parse().map_err(|_| err("rank"))?,
        ));
    }
    Ok(rows)
}

pub fn write_curve_csv(path: &Path, curve: &[(f64, f64)]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "threshold_m,percent").expect("in-memory write");
    for (t, p) in curve {
        writeln!(out, "{t},{p}").expect("in-memory write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_summary(path: &Path, report: &EvalReport) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "queries = {}", report.per_query.len()).expect("in-memory write");
    writeln!(out, "mean_error_m = {}", report.mean_error_m).expect("in-memory write");
    writeln!(out, "median_error_m = {}", report.median_error_m).expect("in-memory write");
    writeln!(out, "recall_at_1 = {}", report.recall_at_1).expect("in-memory write");
    writeln!(out, "recall_at_1pct = {}", report.recall_at_1pct).expect("in-memory write");
    writeln!(out, "no_candidate_queries = {}", report.no_candidate_queries)
        .expect("in-memory write");
    for (t, p) in &report.curve {
        writeln!(out, "within_{t}m_pct = {p}").expect("in-memory write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
