//! Planar poses, GPS fixes and frame transforms shared by every module.
//!
//! The world frame is a local metric frame: x east, y north, heading in
//! degrees counter-clockwise from east, normalized to `[0, 360)`. All
//! distances used for mining and scoring are horizontal.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// A localized sensor reading: planar position, heading and identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    /// Degrees in `[0, 360)`, counter-clockwise from east.
    pub heading: f64,
    pub trip_id: u64,
    /// Seconds, strictly increasing within a trip.
    pub timestamp: f64,
    pub reading_id: u64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64, trip_id: u64, timestamp: f64, reading_id: u64) -> Self {
        Pose {
            x,
            y,
            heading: normalize_heading(heading),
            trip_id,
            timestamp,
            reading_id,
        }
    }
}

/// A noisy position estimate in the same world frame as [`Pose`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpsFix {
    pub x: f64,
    pub y: f64,
}

/// Map an arbitrary angle in degrees onto `[0, 360)`.
pub fn normalize_heading(deg: f64) -> f64 {
    let mut h = deg % 360.0;
    if h < 0.0 {
        h += 360.0;
    }
    // -1e-18 % 360 is -0.0; and values like 359.9999999999999 + eps can
    // round to 360.0 after the addition above.
    if h >= 360.0 {
        h = 0.0;
    }
    h
}

/// Euclidean distance over (x, y).
pub fn geo_distance(a: &Pose, b: &Pose) -> f64 {
    planar_distance(a.x, a.y, b.x, b.y)
}

pub fn planar_distance(ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let dx = ax - bx;
    let dy = ay - by;
    (dx * dx + dy * dy).sqrt()
}

/// Smallest absolute angular difference on the circle, in `[0, 180]`.
pub fn heading_delta(a: f64, b: f64) -> f64 {
    let d = (normalize_heading(a) - normalize_heading(b)).abs();
    if d > 180.0 {
        360.0 - d
    } else {
        d
    }
}

/// Express a world-frame point in the sensor frame of `pose`:
/// translate by `-(pose.x, pose.y, 0)`, then rotate by `-heading` about z.
pub fn to_sensor_frame(world_point: (f64, f64, f64), pose: &Pose) -> (f64, f64, f64) {
    let (wx, wy, wz) = world_point;
    let tx = wx - pose.x;
    let ty = wy - pose.y;
    let theta = -pose.heading.to_radians();
    let (s, c) = theta.sin_cos();
    (tx * c - ty * s, tx * s + ty * c, wz)
}

/// Inverse of [`to_sensor_frame`].
pub fn from_sensor_frame(sensor_point: (f64, f64, f64), pose: &Pose) -> (f64, f64, f64) {
    let (sx, sy, sz) = sensor_point;
    let theta = pose.heading.to_radians();
    let (s, c) = theta.sin_cos();
    (sx * c - sy * s + pose.x, sx * s + sy * c + pose.y, sz)
}

const POSE_HEADER: &str = "reading_id,trip_id,timestamp,x,y,heading";

/// Write a pose table as CSV with header `reading_id,trip_id,timestamp,x,y,heading`.
pub fn write_pose_csv(path: &Path, poses: &[Pose]) -> Result<()> {
    let mut out = Vec::with_capacity(poses.len() * 48 + 64);
    writeln!(out, "{POSE_HEADER}").expect("in-memory write");
    for p in poses {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            p.reading_id, p.trip_id, p.timestamp, p.x, p.y, p.heading
        )
        .expect("in-memory write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read a pose table written by [`write_pose_csv`]. Checks the header,
/// per-field parses, uniqueness of reading ids and per-trip timestamp order.
pub fn read_pose_csv(path: &Path) -> Result<Vec<Pose>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let header = match lines.next() {
        Some((_, Ok(h))) => h,
        Some((_, Err(e))) => return Err(Error::io(path, e)),
        None => return Err(Error::malformed(path, "empty file")),
    };
    if header.trim_end() != POSE_HEADER {
        return Err(Error::malformed(
            path,
            format!("bad header, expected `{POSE_HEADER}`"),
        ));
    }

    let mut poses = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let mut fields = line.split(',');
        let mut next = |name: &str| {
            fields.next().ok_or_else(|| Error::MalformedRecord {
                path: path.to_path_buf(),
                line: lineno,
                detail: format!("missing field {name}"),
            })
        };
        let reading_id = parse_field::<u64>(next("reading_id")?, path, lineno, "reading_id")?;
        let trip_id = parse_field::<u64>(next("trip_id")?, path, lineno, "trip_id")?;
        let timestamp = parse_field::<f64>(next("timestamp")?, path, lineno, "timestamp")?;
        let x = parse_field::<f64>(next("x")?, path, lineno, "x")?;
        let y = parse_field::<f64>(next("y")?, path, lineno, "y")?;
        let heading = parse_field::<f64>(next("heading")?, path, lineno, "heading")?;
        poses.push(Pose::new(x, y, heading, trip_id, timestamp, reading_id));
    }

    validate_pose_table(&poses)?;
    Ok(poses)
}

/// Reading ids unique; (trip_id, timestamp) strictly increasing per trip.
pub fn validate_pose_table(poses: &[Pose]) -> Result<()> {
    let mut ids: Vec<u64> = poses.iter().map(|p| p.reading_id).collect();
    ids.sort_unstable();
    for w in ids.windows(2) {
        if w[0] == w[1] {
            return Err(Error::DuplicateReadingId(w[0]));
        }
    }
    let mut last: std::collections::BTreeMap<u64, f64> = std::collections::BTreeMap::new();
    for p in poses {
        if let Some(&t) = last.get(&p.trip_id) {
            if p.timestamp <= t {
                return Err(Error::InvalidParameter(format!(
                    "trip {} timestamps not strictly increasing at reading {}",
                    p.trip_id, p.reading_id
                )));
            }
        }
        last.insert(p.trip_id, p.timestamp);
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(
    s: &str,
    path: &Path,
    line: usize,
    name: &str,
) -> Result<T> {
    s.trim().parse::<T>().map_err(|_| Error::MalformedRecord {
        path: path.to_path_buf(),
        line,
        detail: format!("cannot parse {name} from `{s}`"),
    })
}
