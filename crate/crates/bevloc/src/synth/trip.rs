//! Trip simulation: poses along a waypoint path at fixed spacing, GPS
//! fixes with per-trip bias plus per-reading noise, and smoothly drifting
//! condition metadata. Reading ids are `trip_id * 1_000_000 + index`.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geom::{GpsFix, Pose};
use crate::seeds::{derive_seed, rng_for};

use super::{
    simulate_sweep_labeled, ConditionTags, GpsModel, SweepConfig, TripSpec, World,
};

const READING_ID_STRIDE: u64 = 1_000_000;

/// Poses, GPS fixes and metadata for one trip (no clouds).
#[derive(Debug, Clone, PartialEq)]
pub struct TripReadings {
    pub poses: Vec<Pose>,
    pub gps: Vec<GpsFix>,
    pub metadata: Vec<(u64, ConditionTags)>,
}

/// A full trip: readings plus one simulated sweep per pose.
#[derive(Debug, Clone)]
pub struct TripData {
    pub readings: TripReadings,
    pub clouds: Vec<PointCloud>,
}

/// Inverse of the Rayleigh median: the per-axis sigma whose planar error
/// magnitude has the given median.
pub fn calibrate_gps_sigma(target_median_m: f64) -> Result<f64> {
    if !(target_median_m > 0.0) {
        return Err(Error::InvalidParameter(
            "GPS median target must be positive".into(),
        ));
    }
    Ok(target_median_m / (2.0 * std::f64::consts::LN_2).sqrt())
}

/// Walk the waypoint path at `spacing` intervals; heading is the segment
/// tangent. Timestamps advance one second per reading.
pub fn simulate_trip_readings(
    world: &World,
    trip: &TripSpec,
    gps: &GpsModel,
    seed: u64,
) -> Result<TripReadings> {
    trip.validate()?;
    let mut rng = rng_for(seed, "trip", trip.trip_id);
    let bias = (
        gaussian(&mut rng) * gps.bias_std_m,
        gaussian(&mut rng) * gps.bias_std_m,
    );
    let drift = TagDrift::new(&trip.conditions, &mut rng);

    let mut poses = Vec::new();
    let mut fixes = Vec::new();
    let mut metadata = Vec::new();

    let mut segment = 0usize;
    let mut along = 0.0f64; // distance into the current segment
    let mut index = 0u64;
    loop {
        let (ax, ay) = trip.path[segment];
        let (bx, by) = trip.path[segment + 1];
        let seg_len = ((bx - ax).powi(2) + (by - ay).powi(2)).sqrt();
        if seg_len <= 1e-12 {
            if segment + 2 >= trip.path.len() {
                break;
            }
            segment += 1;
            continue;
        }
        if along > seg_len {
            if segment + 2 >= trip.path.len() {
                break;
            }
            along -= seg_len;
            segment += 1;
            continue;
        }
        let frac = along / seg_len;
        let x = ax + (bx - ax) * frac;
        let y = ay + (by - ay) * frac;
        if !world.contains(x, y) {
            return Err(Error::PoseOutsideWorld { x, y });
        }
        let heading = (by - ay).atan2(bx - ax).to_degrees();
        let reading_id = trip.trip_id * READING_ID_STRIDE + index;
        let pose = Pose::new(x, y, heading, trip.trip_id, index as f64, reading_id);

        let fix = GpsFix {
            x: x + bias.0 + gaussian(&mut rng) * gps.sigma_m,
            y: y + bias.1 + gaussian(&mut rng) * gps.sigma_m,
        };
        let tags = drift.at(index as f64 * trip.spacing_m);

        poses.push(pose);
        fixes.push(fix);
        metadata.push((reading_id, tags));
        index += 1;
        along += trip.spacing_m;
    }

    Ok(TripReadings {
        poses,
        gps: fixes,
        metadata,
    })
}

/// Full trip simulation including sweeps. Each sweep draws from a stream
/// keyed by its reading id, so per-reading generation parallelizes without
/// changing output.
pub fn simulate_trip(
    world: &World,
    trip: &TripSpec,
    gps: &GpsModel,
    seed: u64,
    sweep_config: &SweepConfig,
) -> Result<TripData> {
    let readings = simulate_trip_readings(world, trip, gps, seed)?;
    let sweep_seed = derive_seed(seed, "trip-sweeps", 0);
    let clouds = readings
        .poses
        .par_iter()
        .zip(&readings.metadata)
        .map(|(pose, (_, tags))| {
            simulate_sweep_labeled(world, pose, tags, sweep_seed, sweep_config).map(|s| s.cloud)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TripData { readings, clouds })
}

/// Smooth per-field condition drift along the trip: a slow sinusoid with
/// randomized phase, period and amplitude, clamped to each field's range.
struct TagDrift {
    base: ConditionTags,
    phases: [f64; 4],
    periods: [f64; 4],
    amp_occlusion: f64,
    amp_precip: f64,
    amp_sun: f64,
    amp_cloud: f64,
}

impl TagDrift {
    fn new(base: &ConditionTags, rng: &mut impl Rng) -> TagDrift {
        let mut phases = [0.0; 4];
        let mut periods = [0.0; 4];
        for i in 0..4 {
            phases[i] = rng.random_range(0.0..std::f64::consts::TAU);
            periods[i] = rng.random_range(150.0..600.0);
        }
        // A zero base stays exactly zero: drifting a clear-weather field
        // would silently re-enable rain jitter and clutter.
        let amp_occlusion = if base.lidar_occlusion_pct > 0.0 {
            rng.random_range(0.0..=(base.lidar_occlusion_pct * 0.5))
        } else {
            0.0
        };
        let amp_precip = if base.precipitation_mm > 0.0 {
            rng.random_range(0.0..=(base.precipitation_mm * 0.5))
        } else {
            0.0
        };
        TagDrift {
            base: *base,
            phases,
            periods,
            amp_occlusion,
            amp_precip,
            amp_sun: 6.0,
            amp_cloud: 12.0,
        }
    }

    fn wave(&self, slot: usize, s: f64) -> f64 {
        (std::f64::consts::TAU * s / self.periods[slot] + self.phases[slot]).sin()
    }

    fn at(&self, s: f64) -> ConditionTags {
        let mut t = self.base;
        t.lidar_occlusion_pct =
            (t.lidar_occlusion_pct + self.amp_occlusion * self.wave(0, s)).clamp(0.0, 100.0);
        t.precipitation_mm = (t.precipitation_mm + self.amp_precip * self.wave(1, s)).max(0.0);
        t.sun_angle_deg = (t.sun_angle_deg + self.amp_sun * self.wave(2, s)).clamp(-90.0, 90.0);
        t.cloud_cover_pct = (t.cloud_cover_pct + self.amp_cloud * self.wave(3, s)).clamp(0.0, 100.0);
        t.image_occlusion_pct =
            (t.image_occlusion_pct + 0.4 * self.amp_occlusion * self.wave(0, s)).clamp(0.0, 100.0);
        t
    }
}

/// Random walk over the road lattice starting at a seed-chosen node,
/// avoiding immediate backtracking, until the path reaches `length_m`.
/// Interior nodes are preferred so laterally offset lanes stay inside the
/// world extent.
pub fn lattice_circuit_path(world: &World, length_m: f64, seed: u64) -> Vec<(f64, f64)> {
    let roads = &world.roads;
    let mut rng = rng_for(seed, "circuit", 0);
    let interior = |i: i64, n: usize| -> bool {
        if n <= 2 {
            i >= 0 && (i as usize) < n
        } else {
            i >= 1 && (i as usize) < n - 1
        }
    };
    let pick_start = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> i64 {
        if n <= 2 {
            rng.random_range(0..n) as i64
        } else {
            rng.random_range(1..n - 1) as i64
        }
    };
    let mut i = pick_start(&mut rng, roads.nx);
    let mut j = pick_start(&mut rng, roads.ny);
    let mut path = vec![roads.node(i as usize, j as usize)];
    let mut total = 0.0;
    let mut last_dir: Option<(i64, i64)> = None;
    while total < length_m {
        let valid: Vec<(i64, i64)> = vec![(1, 0), (-1, 0), (0, 1), (0, -1)]
            .into_iter()
            .filter(|&(dx, dy)| {
                let (ni, nj) = (i + dx, j + dy);
                ni >= 0 && nj >= 0 && (ni as usize) < roads.nx && (nj as usize) < roads.ny
            })
            .collect();
        if valid.is_empty() {
            break; // single-node lattice
        }
        let mut options: Vec<(i64, i64)> = valid
            .iter()
            .copied()
            .filter(|&(dx, dy)| interior(i + dx, roads.nx) && interior(j + dy, roads.ny))
            .collect();
        if options.is_empty() {
            options = valid;
        }
        if options.len() > 1 {
            if let Some((lx, ly)) = last_dir {
                options.retain(|&(dx, dy)| (dx, dy) != (-lx, -ly));
            }
        }
        let (dx, dy) = options[rng.random_range(0..options.len())];
        i += dx;
        j += dy;
        last_dir = Some((dx, dy));
        path.push(roads.node(i as usize, j as usize));
        total += roads.pitch;
    }
    path
}

/// Parallel lane offset of a polyline: each segment shifts by `lateral`
/// along its left normal, with mitered corners (miter capped at 2x so
/// near-U-turns cannot explode).
pub fn offset_path(path: &[(f64, f64)], lateral: f64) -> Vec<(f64, f64)> {
    if lateral == 0.0 || path.len() < 2 {
        return path.to_vec();
    }
    let normal = |a: (f64, f64), b: (f64, f64)| -> Option<(f64, f64)> {
        let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        (len > 1e-12).then(|| (-(b.1 - a.1) / len, (b.0 - a.0) / len))
    };
    let mut out = Vec::with_capacity(path.len());
    for idx in 0..path.len() {
        let n_in = (idx > 0).then(|| normal(path[idx - 1], path[idx])).flatten();
        let n_out = (idx + 1 < path.len())
            .then(|| normal(path[idx], path[idx + 1]))
            .flatten();
        let (mx, my, scale) = match (n_in, n_out) {
            (Some(a), Some(b)) => {
                let (sx, sy) = (a.0 + b.0, a.1 + b.1);
                let norm = (sx * sx + sy * sy).sqrt();
                if norm < 1e-9 {
                    (b.0, b.1, 1.0)
                } else {
                    let m = (sx / norm, sy / norm);
                    let cos_half = (m.0 * b.0 + m.1 * b.1).max(0.5);
                    (m.0, m.1, 1.0 / cos_half)
                }
            }
            (Some(a), None) => (a.0, a.1, 1.0),
            (None, Some(b)) => (b.0, b.1, 1.0),
            (None, None) => (0.0, 0.0, 0.0),
        };
        out.push((
            path[idx].0 + lateral * scale * mx,
            path[idx].1 + lateral * scale * my,
        ));
    }
    out
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

const METADATA_HEADER: &str = "reading_id,sun_angle_deg,precipitation_mm,visibility_km,uv_index,temperature_c,humidity_pct,cloud_cover_pct,wind_speed_mps,image_occlusion_pct,lidar_occlusion_pct,construction_pct";

pub fn write_metadata_csv(path: &Path, rows: &[(u64, ConditionTags)]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{METADATA_HEADER}").expect("in-memory write");
    for (id, t) in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            id,
            t.sun_angle_deg,
            t.precipitation_mm,
            t.visibility_km,
            t.uv_index,
            t.temperature_c,
            t.humidity_pct,
            t.cloud_cover_pct,
            t.wind_speed_mps,
            t.image_occlusion_pct,
            t.lidar_occlusion_pct,
            t.construction_pct
        )
        .expect("in-memory write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_metadata_csv(path: &Path) -> Result<Vec<(u64, ConditionTags)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METADATA_HEADER => {}
        _ => return Err(Error::malformed(path, "bad metadata header")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 12 {
            return Err(Error::MalformedRecord {
                path: path.to_path_buf(),
                line: i + 2,
                detail: "expected 12 fields".into(),
            });
        }
        let err = |what: &str| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: i + 2,
            detail: format!("cannot parse {what}"),
        };
        let fnum = |idx: usize, what: &str| -> Result<f64> {
            parts[idx].parse::<f64>().map_err(|_| err(what))
        };
        rows.push((
            parts[0].parse::<u64>().map_err(|_| err("reading_id"))?,
            ConditionTags {
                sun_angle_deg: fnum(1, "sun_angle_deg")?,
                precipitation_mm: fnum(2, "precipitation_mm")?,
                visibility_km: fnum(3, "visibility_km")?,
                uv_index: parts[4].parse::<u32>().map_err(|_| err("uv_index"))?,
                temperature_c: fnum(5, "temperature_c")?,
                humidity_pct: fnum(6, "humidity_pct")?,
                cloud_cover_pct: fnum(7, "cloud_cover_pct")?,
                wind_speed_mps: fnum(8, "wind_speed_mps")?,
                image_occlusion_pct: fnum(9, "image_occlusion_pct")?,
                lidar_occlusion_pct: fnum(10, "lidar_occlusion_pct")?,
                construction_pct: fnum(11, "construction_pct")?,
            },
        ));
    }
    Ok(rows)
}

const GPS_HEADER: &str = "reading_id,x,y";

pub fn write_gps_csv(path: &Path, rows: &[(u64, GpsFix)]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{GPS_HEADER}").expect("in-memory write");
    for (id, fix) in rows {
        writeln!(out, "{},{},{}", id, fix.x, fix.y).expect("in-memory write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_gps_csv(path: &Path) -> Result<Vec<(u64, GpsFix)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == GPS_HEADER => {}
        _ => return Err(Error::malformed(path, "bad gps header")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::MalformedRecord {
                path: path.to_path_buf(),
                line: i + 2,
                detail: "expected 3 fields".into(),
            });
        }
        let err = || Error::MalformedRecord {
            path: path.to_path_buf(),
            line: i + 2,
            detail: "bad gps row".into(),
        };
        rows.push((
            parts[0].parse().map_err(|_| err())?,
            GpsFix {
                x: parts[1].parse().map_err(|_| err())?,
                y: parts[2].parse().map_err(|_| err())?,
            },
        ));
    }
    Ok(rows)
}
