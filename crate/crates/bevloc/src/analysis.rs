//! Metadata-vs-error analysis: the joined per-query table, failure flags,
//! the GPS-error filter, Pearson correlation matrices, binned summaries and
//! the oracle fusion baseline.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::synth::ConditionTags;

/// Tag column names, matching the metadata CSV header.
pub const TAG_COLUMNS: [&str; 11] = [
    "sun_angle_deg",
    "precipitation_mm",
    "visibility_km",
    "uv_index",
    "temperature_c",
    "humidity_pct",
    "cloud_cover_pct",
    "wind_speed_mps",
    "image_occlusion_pct",
    "lidar_occlusion_pct",
    "construction_pct",
];

#[derive(Debug, Clone)]
pub struct AnalysisRow {
    pub query_id: u64,
    /// Per-method localization error, aligned with [`AnalysisTable::methods`].
    pub errors: Vec<f64>,
    pub gps_error_m: f64,
    pub tags: ConditionTags,
}

/// One row per evaluated query; queries without metadata are excluded with
/// a count reported at construction.
#[derive(Debug, Clone)]
pub struct AnalysisTable {
    pub methods: Vec<String>,
    pub rows: Vec<AnalysisRow>,
    pub failure_threshold_m: f64,
}

impl AnalysisTable {
    /// Join per-method report rows with metadata on reading id. Every
    /// method must cover the same query set. Returns the table and the
    /// count of queries dropped for missing metadata.
    pub fn join(
        reports: &[(String, Vec<(u64, f64, f64, usize)>)],
        metadata: &BTreeMap<u64, ConditionTags>,
        failure_threshold_m: f64,
    ) -> Result<(AnalysisTable, usize)> {
        if reports.is_empty() {
            return Err(Error::EmptyInput("analysis needs at least one report"));
        }
        if !(failure_threshold_m > 0.0) {
            return Err(Error::InvalidParameter(
                "failure threshold must be positive".into(),
            ));
        }
        let first = &reports[0].1;
        let mut rows = Vec::with_capacity(first.len());
        let mut excluded = 0usize;
        let lookups: Vec<BTreeMap<u64, (f64, f64)>> = reports
            .iter()
            .map(|(_, rows)| rows.iter().map(|r| (r.0, (r.1, r.2))).collect())
            .collect();
        for &(query_id, _, gps_error_m, _) in first {
            let Some(tags) = metadata.get(&query_id) else {
                excluded += 1;
                continue;
            };
            let mut errors = Vec::with_capacity(reports.len());
            for lookup in &lookups {
                match lookup.get(&query_id) {
                    Some(&(e, _)) => errors.push(e),
                    None => {
                        return Err(Error::UnknownReadingId(query_id));
                    }
                }
            }
            rows.push(AnalysisRow {
                query_id,
                errors,
                gps_error_m,
                tags: *tags,
            });
        }
        Ok((
            AnalysisTable {
                methods: reports.iter().map(|(n, _)| n.clone()).collect(),
                rows,
                failure_threshold_m,
            },
            excluded,
        ))
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for m in &self.methods {
            names.push(format!("failure_{m}"));
        }
        names.push("gps_error_m".into());
        names.extend(TAG_COLUMNS.iter().map(|s| s.to_string()));
        names
    }

    /// Numeric values of a named column. Failure columns are 0/1 flags at
    /// the table's threshold.
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        if let Some(method) = name.strip_prefix("error_") {
            let idx = self.method_index(method)?;
            return Ok(self.rows.iter().map(|r| r.errors[idx]).collect());
        }
        if let Some(method) = name.strip_prefix("failure_") {
            let idx = self.method_index(method)?;
            let errors: Vec<f64> = self.rows.iter().map(|r| r.errors[idx]).collect();
            return Ok(failure_flags(&errors, self.failure_threshold_m)?
                .into_iter()
                .map(|f| f as u8 as f64)
                .collect());
        }
        if name == "gps_error_m" {
            return Ok(self.rows.iter().map(|r| r.gps_error_m).collect());
        }
        let tag = |f: fn(&ConditionTags) -> f64| -> Vec<f64> {
            self.rows.iter().map(|r| f(&r.tags)).collect()
        };
        Ok(match name {
            "sun_angle_deg" => tag(|t| t.sun_angle_deg),
            "precipitation_mm" => tag(|t| t.precipitation_mm),
            "visibility_km" => tag(|t| t.visibility_km),
            "uv_index" => tag(|t| t.uv_index as f64),
            "temperature_c" => tag(|t| t.temperature_c),
            "humidity_pct" => tag(|t| t.humidity_pct),
            "cloud_cover_pct" => tag(|t| t.cloud_cover_pct),
            "wind_speed_mps" => tag(|t| t.wind_speed_mps),
            "image_occlusion_pct" => tag(|t| t.image_occlusion_pct),
            "lidar_occlusion_pct" => tag(|t| t.lidar_occlusion_pct),
            "construction_pct" => tag(|t| t.construction_pct),
            other => {
                return Err(Error::InvalidParameter(format!(
                    "unknown analysis column `{other}`"
                )))
            }
        })
    }

    fn method_index(&self, method: &str) -> Result<usize> {
        self.methods
            .iter()
            .position(|m| m == method)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown method `{method}`")))
    }
}

/// failure = error strictly exceeds the threshold.
pub fn failure_flags(errors: &[f64], threshold_m: f64) -> Result<Vec<bool>> {
    if !(threshold_m > 0.0) {
        return Err(Error::InvalidParameter(
            "failure threshold must be positive".into(),
        ));
    }
    Ok(errors.iter().map(|&e| e > threshold_m).collect())
}

/// Drop rows whose GPS error exceeds the bound; returns the dropped count.
pub fn gps_filter(table: &AnalysisTable, max_gps_error_m: f64) -> (AnalysisTable, usize) {
    let kept: Vec<AnalysisRow> = table
        .rows
        .iter()
        .filter(|r| r.gps_error_m <= max_gps_error_m)
        .cloned()
        .collect();
    let dropped = table.rows.len() - kept.len();
    (
        AnalysisTable {
            methods: table.methods.clone(),
            rows: kept,
            failure_threshold_m: table.failure_threshold_m,
        },
        dropped,
    )
}

/// A symmetric Pearson matrix; `None` marks undefined entries (constant or
/// non-finite columns).
#[derive(Debug, Clone)]
pub struct PearsonMatrix {
    pub columns: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

/// Standard two-pass Pearson r per column pair. Columns that are constant
/// or contain non-finite values yield undefined entries rather than
/// numbers.
pub fn pearson_matrix(table: &AnalysisTable, columns: &[String]) -> Result<PearsonMatrix> {
    if table.rows.len() < 2 {
        return Err(Error::EmptyInput("pearson needs at least 2 rows"));
    }
    let data: Vec<Vec<f64>> = columns
        .iter()
        .map(|c| table.column(c))
        .collect::<Result<Vec<_>>>()?;
    let usable: Vec<bool> = data
        .iter()
        .map(|col| {
            let finite = col.iter().all(|v| v.is_finite());
            let constant = col.windows(2).all(|w| w[0] == w[1]);
            finite && !constant
        })
        .collect();

    let n = columns.len();
    let mut values = vec![vec![None; n]; n];
    for i in 0..n {
        if !usable[i] {
            continue;
        }
        values[i][i] = Some(1.0);
        for j in (i + 1)..n {
            if !usable[j] {
                continue;
            }
            let r = pearson_r(&data[i], &data[j]);
            values[i][j] = Some(r);
            values[j][i] = Some(r);
        }
    }
    Ok(PearsonMatrix {
        columns: columns.to_vec(),
        values,
    })
}

/// Two-pass Pearson correlation of equal-length samples.
pub fn pearson_r(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    sxy / (sxx.sqrt() * syy.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BinStatistic {
    Mean,
    /// Fraction of rows whose value strictly exceeds the threshold.
    FailureRate { threshold_m: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinRow {
    pub lo: f64,
    pub hi: f64,
    pub statistic: Option<f64>,
    pub count: usize,
}

/// Bin `value_column` by `tag_column` over the given edges. Bins are
/// left-closed and right-open; the last bin also includes its right edge.
/// Empty bins are emitted with count 0 and an undefined statistic.
pub fn binned_summary(
    table: &AnalysisTable,
    tag_column: &str,
    edges: &[f64],
    value_column: &str,
    statistic: BinStatistic,
) -> Result<Vec<BinRow>> {
    if edges.len() < 2 {
        return Err(Error::InvalidParameter("need at least two bin edges".into()));
    }
    for w in edges.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::InvalidParameter(
                "bin edges must be strictly ascending".into(),
            ));
        }
    }
    let keys = table.column(tag_column)?;
    let values = table.column(value_column)?;
    let n_bins = edges.len() - 1;
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); n_bins];
    for (&k, &v) in keys.iter().zip(&values) {
        if k < edges[0] || k > edges[n_bins] {
            continue;
        }
        // Interior edges belong to the bin on their right.
        let mut bin = n_bins - 1;
        for i in 0..n_bins {
            if k < edges[i + 1] {
                bin = i;
                break;
            }
        }
        buckets[bin].push(v);
    }
    Ok(buckets
        .into_iter()
        .enumerate()
        .map(|(i, vals)| {
            let count = vals.len();
            let statistic = if vals.is_empty() {
                None
            } else {
                Some(match statistic {
                    BinStatistic::Mean => vals.iter().sum::<f64>() / count as f64,
                    BinStatistic::FailureRate { threshold_m } => {
                        vals.iter().filter(|&&v| v > threshold_m).count() as f64 / count as f64
                    }
                })
            };
            BinRow {
                lo: edges[i],
                hi: edges[i + 1],
                statistic,
                count,
            }
        })
        .collect())
}

/// Per-query minimum error across methods (the hypothetical picker that
/// always chooses the better method).
pub fn oracle_fusion_error(table: &AnalysisTable, method_columns: &[String]) -> Result<Vec<f64>> {
    if method_columns.len() < 2 {
        return Err(Error::InvalidParameter(
            "oracle fusion needs at least two methods".into(),
        ));
    }
    let cols: Vec<Vec<f64>> = method_columns
        .iter()
        .map(|c| table.column(c))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(table.rows.len());
    for row in 0..table.rows.len() {
        out.push(cols.iter().map(|c| c[row]).fold(f64::INFINITY, f64::min));
    }
    Ok(out)
}

/// Long-form correlations file: `col_a,col_b,r` with `NA` for undefined.
pub fn write_correlations_csv(path: &Path, matrix: &PearsonMatrix) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "col_a,col_b,r").expect("in-memory write");
    for (i, a) in matrix.columns.iter().enumerate() {
        for (j, b) in matrix.columns.iter().enumerate() {
            if j < i {
                continue;
            }
            match matrix.values[i][j] {
                Some(r) => writeln!(out, "{a},{b},{r}"),
                None => writeln!(out, "{a},{b},NA"),
            }
            .expect("in-memory write");
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_bins_csv(path: &Path, rows: &[BinRow]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "bin_lo,bin_hi,statistic,count").expect("in-memory write");
    for r in rows {
        match r.statistic {
            Some(s) => writeln!(out, "{},{},{},{}", r.lo, r.hi, s, r.count),
            None => writeln!(out, "{},{},NA,{}", r.lo, r.hi, r.count),
        }
        .expect("in-memory write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
