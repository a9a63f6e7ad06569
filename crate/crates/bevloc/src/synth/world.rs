//! World generation: a road lattice and box landmarks placed along the
//! streets, all drawn deterministically from the world seed.
//!
//! File layout (`.pitw`): magic `PITW`, u32 version (=1), the WorldSpec
//! fields (seed u64, extents, pitch, landmark_count u64, the three ranges
//! and ground reflectivity as f64), u64 landmark record count, landmark
//! records of six f64 (cx, cy, half_x, half_y, height, reflectivity), and
//! a trailing u64 FNV-1a checksum.

use std::io::{BufReader, Read};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::seeds::{rng_for, Fnv1a};
use crate::spatial::SpatialGrid;

use super::WorldSpec;

pub const PITW_MAGIC: &[u8; 4] = b"PITW";
pub const PITW_VERSION: u32 = 1;

/// Axis-aligned box sitting on the ground plane (z = 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub cx: f64,
    pub cy: f64,
    pub half_x: f64,
    pub half_y: f64,
    pub height: f64,
    pub reflectivity: f64,
}

/// Streets along x = i*pitch for i in 0..nx and y = j*pitch for j in 0..ny.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoadGraph {
    pub pitch: f64,
    pub nx: usize,
    pub ny: usize,
}

impl RoadGraph {
    pub fn node_count(&self) -> usize {
        self.nx * self.ny
    }

    pub fn node(&self, i: usize, j: usize) -> (f64, f64) {
        (i as f64 * self.pitch, j as f64 * self.pitch)
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub spec: WorldSpec,
    pub roads: RoadGraph,
    pub landmarks: Vec<Landmark>,
    landmark_grid: SpatialGrid,
    max_half_extent: f64,
}

impl World {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        (0.0..=self.spec.extent_x).contains(&x) && (0.0..=self.spec.extent_y).contains(&y)
    }

    /// Landmark indices possibly within `radius` of (x, y), ascending.
    pub fn landmarks_near(&self, x: f64, y: f64, radius: f64) -> Vec<usize> {
        self.landmark_grid
            .candidates_within(x, y, radius + self.max_half_extent)
    }
}

impl PartialEq for World {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.roads == other.roads && self.landmarks == other.landmarks
    }
}

/// Deterministic landmark placement along the road lattice.
pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let nx = (spec.extent_x / spec.lattice_pitch).floor() as usize + 1;
    let ny = (spec.extent_y / spec.lattice_pitch).floor() as usize + 1;
    let roads = RoadGraph {
        pitch: spec.lattice_pitch,
        nx,
        ny,
    };

    let mut rng = rng_for(spec.seed, "world-landmarks", 0);
    let clearance = 5.0; // keep facades off the carriageway
    let mut landmarks = Vec::with_capacity(spec.landmark_count);
    let mut attempts = 0usize;
    while landmarks.len() < spec.landmark_count && attempts < spec.landmark_count * 50 {
        attempts += 1;
        let half_x = rng.random_range(spec.footprint_range.0..=spec.footprint_range.1) / 2.0;
        let half_y = rng.random_range(spec.footprint_range.0..=spec.footprint_range.1) / 2.0;
        let height = rng.random_range(spec.height_range.0..=spec.height_range.1);
        let reflectivity =
            rng.random_range(spec.reflectivity_range.0..=spec.reflectivity_range.1);

        // Pick a street and stand the box beside it.
        let vertical: bool = rng.random_range(0..2) == 0;
        let side = if rng.random_range(0..2) == 0 { 1.0 } else { -1.0 };
        let (cx, cy) = if vertical {
            let line = rng.random_range(0..nx) as f64 * spec.lattice_pitch;
            let along = rng.random_range(0.0..spec.extent_y);
            (line + side * (clearance + half_x), along)
        } else {
            let line = rng.random_range(0..ny) as f64 * spec.lattice_pitch;
            let along = rng.random_range(0.0..spec.extent_x);
            (along, line + side * (clearance + half_y))
        };
        if cx - half_x < 0.0
            || cx + half_x > spec.extent_x
            || cy - half_y < 0.0
            || cy + half_y > spec.extent_y
        {
            continue;
        }
        // Keep every street corridor clear so poses never sit inside a box.
        let road_half = 3.0;
        let near_v = (cx / spec.lattice_pitch).round();
        if near_v >= 0.0
            && (near_v as usize) < nx
            && (cx - near_v * spec.lattice_pitch).abs() < half_x + road_half
        {
            continue;
        }
        let near_h = (cy / spec.lattice_pitch).round();
        if near_h >= 0.0
            && (near_h as usize) < ny
            && (cy - near_h * spec.lattice_pitch).abs() < half_y + road_half
        {
            continue;
        }
        landmarks.push(Landmark {
            cx,
            cy,
            half_x,
            half_y,
            height,
            reflectivity,
        });
    }

    Ok(build_world(spec.clone(), roads, landmarks))
}

fn build_world(spec: WorldSpec, roads: RoadGraph, landmarks: Vec<Landmark>) -> World {
    let landmark_grid = SpatialGrid::build(25.0, landmarks.iter().map(|l| (l.cx, l.cy)));
    let max_half_extent = landmarks
        .iter()
        .map(|l| l.half_x.max(l.half_y))
        .fold(0.0, f64::max);
    World {
        spec,
        roads,
        landmarks,
        landmark_grid,
        max_half_extent,
    }
}

pub fn write_world(path: &Path, world: &World) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(PITW_MAGIC);
    buf.extend_from_slice(&PITW_VERSION.to_le_bytes());
    let s = &world.spec;
    buf.extend_from_slice(&s.seed.to_le_bytes());
    for v in [
        s.extent_x,
        s.extent_y,
        s.lattice_pitch,
        s.footprint_range.0,
        s.footprint_range.1,
        s.height_range.0,
        s.height_range.1,
        s.reflectivity_range.0,
        s.reflectivity_range.1,
        s.ground_reflectivity,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(s.landmark_count as u64).to_le_bytes());
    buf.extend_from_slice(&(world.landmarks.len() as u64).to_le_bytes());
    for l in &world.landmarks {
        for v in [l.cx, l.cy, l.half_x, l.half_y, l.height, l.reflectivity] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut hasher = Fnv1a::new();
    hasher.update(&buf);
    buf.extend_from_slice(&hasher.finish().to_le_bytes());
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_world(path: &Path) -> Result<World> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::malformed(path, "file shorter than checksum"));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let mut hasher = Fnv1a::new();
    hasher.update(payload);
    if hasher.finish() != stored {
        return Err(Error::ChecksumMismatch {
            path: path.to_path_buf(),
        });
    }
    let mut r = BufReader::new(payload);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != PITW_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "PITW",
        });
    }
    let version = crate::cloud::read_u32(&mut r, path)?;
    if version != PITW_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: PITW_VERSION,
        });
    }
    let seed = crate::cloud::read_u64(&mut r, path)?;
    let mut f = |_: &str| crate::cloud::read_f64(&mut r, path);
    let extent_x = f("extent_x")?;
    let extent_y = f("extent_y")?;
    let lattice_pitch = f("pitch")?;
    let footprint_range = (f("f0")?, f("f1")?);
    let height_range = (f("h0")?, f("h1")?);
    let reflectivity_range = (f("r0")?, f("r1")?);
    let ground_reflectivity = f("ground")?;
    let landmark_count = crate::cloud::read_u64(&mut r, path)? as usize;
    let stored_landmarks = crate::cloud::read_u64(&mut r, path)? as usize;
    let mut landmarks = Vec::with_capacity(stored_landmarks.min(1 << 20));
    for _ in 0..stored_landmarks {
        let mut v = [0f64; 6];
        for slot in v.iter_mut() {
            *slot = crate::cloud::read_f64(&mut r, path)?;
        }
        landmarks.push(Landmark {
            cx: v[0],
            cy: v[1],
            half_x: v[2],
            half_y: v[3],
            height: v[4],
            reflectivity: v[5],
        });
    }
    let spec = WorldSpec {
        seed,
        extent_x,
        extent_y,
        lattice_pitch,
        landmark_count,
        footprint_range,
        height_range,
        reflectivity_range,
        ground_reflectivity,
    };
    spec.validate()?;
    let nx = (spec.extent_x / spec.lattice_pitch).floor() as usize + 1;
    let ny = (spec.extent_y / spec.lattice_pitch).floor() as usize + 1;
    Ok(build_world(
        spec,
        RoadGraph {
            pitch: lattice_pitch,
            nx,
            ny,
        },
        landmarks,
    ))
}
