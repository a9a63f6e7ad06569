//! Bird's-eye-view voxelization and the point-cloud preprocessing in front
//! of it: ground removal and coarse voxel-filter downsampling.
//!
//! The grid covers `x in [-x_extent/2, x_extent/2)`, `y in [-y_extent/2,
//! y_extent/2)` around the sensor and `z in [z_offset, z_offset + z_extent)`
//! split into `channels` slabs. Binning is lower-edge inclusive and
//! upper-edge exclusive, so a coordinate landing exactly on the top edge is
//! dropped; that keeps grids reproducible across platforms.

use std::collections::HashMap;

use crate::cloud::{Point, PointCloud};
use crate::error::{Error, Result};

/// Geometry of a BEV voxel volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x_extent: f64,
    pub y_extent: f64,
    pub xy_resolution: f64,
    pub z_extent: f64,
    pub channels: usize,
    /// Bottom of the volume relative to the sensor origin.
    pub z_offset: f64,
}

impl GridSpec {
    pub fn new(
        x_extent: f64,
        y_extent: f64,
        xy_resolution: f64,
        z_extent: f64,
        channels: usize,
        z_offset: f64,
    ) -> Result<Self> {
        if !(x_extent > 0.0 && y_extent > 0.0 && xy_resolution > 0.0) {
            return Err(Error::InvalidParameter(
                "grid extents and resolution must be positive".into(),
            ));
        }
        if channels == 0 || !(z_extent > 0.0) {
            return Err(Error::InvalidParameter(
                "grid needs channels >= 1 and z_extent > 0".into(),
            ));
        }
        let spec = GridSpec {
            x_extent,
            y_extent,
            xy_resolution,
            z_extent,
            channels,
            z_offset,
        };
        for (extent, cells) in [(x_extent, spec.cells_x()), (y_extent, spec.cells_y())] {
            if cells == 0 || (cells as f64 * xy_resolution - extent).abs() > 1e-9 {
                return Err(Error::InvalidParameter(format!(
                    "extent {extent} is not an integral number of {xy_resolution} m cells"
                )));
            }
        }
        Ok(spec)
    }

    /// Oxford-style grid: 40 m x 25 m at 8 cells per metre, 10 m of z into
    /// 16 channels; 320 x 200 x 16 voxels.
    pub fn oxford() -> Self {
        GridSpec::new(40.0, 25.0, 0.125, 10.0, 16, -0.5).expect("preset is valid")
    }

    /// Large-area grid: 2.4 m cells over roughly 200 m x 125 m (pinned to
    /// 84 x 52 whole cells, i.e. 201.6 m x 124.8 m), 3.2 m of z into 16
    /// channels. The quoted area is not an exact multiple of the cell size,
    /// so extents are widened to the pinned cell counts.
    pub fn pit30m() -> Self {
        GridSpec::new(84.0 * 2.4, 52.0 * 2.4, 2.4, 3.2, 16, -0.5).expect("preset is valid")
    }

    /// Small grid sized for synthetic-city experiments.
    pub fn desk() -> Self {
        GridSpec::new(80.0, 80.0, 1.0, 6.4, 16, -0.5).expect("preset is valid")
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "oxford" => Ok(Self::oxford()),
            "pit30m" => Ok(Self::pit30m()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::InvalidParameter(format!(
                "unknown grid preset `{other}` (expected oxford|pit30m|desk)"
            ))),
        }
    }

    pub fn cells_x(&self) -> usize {
        (self.x_extent / self.xy_resolution).round() as usize
    }

    pub fn cells_y(&self) -> usize {
        (self.y_extent / self.xy_resolution).round() as usize
    }

    pub fn voxel_count(&self) -> usize {
        self.cells_x() * self.cells_y() * self.channels
    }

    /// Voxel index of a sensor-frame point, or None when out of bounds.
    pub fn bin(&self, x: f64, y: f64, z: f64) -> Option<(usize, usize, usize)> {
        let fx = (x + self.x_extent / 2.0) / self.xy_resolution;
        let fy = (y + self.y_extent / 2.0) / self.xy_resolution;
        let fz = (z - self.z_offset) / (self.z_extent / self.channels as f64);
        if fx < 0.0 || fy < 0.0 || fz < 0.0 {
            return None;
        }
        let (ix, iy, iz) = (fx.floor() as usize, fy.floor() as usize, fz.floor() as usize);
        if ix >= self.cells_x() || iy >= self.cells_y() || iz >= self.channels {
            return None;
        }
        Some((ix, iy, iz))
    }
}

/// Occupancy counts and per-voxel mean intensity over a [`GridSpec`].
/// Immutable once built by [`voxelize`].
#[derive(Debug, Clone, PartialEq)]
pub struct BEVGrid {
    pub spec: GridSpec,
    occupancy: Vec<u32>,
    mean_intensity: Vec<f64>,
    dropped_points: usize,
}

impl BEVGrid {
    fn flat(&self, ix: usize, iy: usize, ch: usize) -> usize {
        (ix * self.spec.cells_y() + iy) * self.spec.channels + ch
    }

    pub fn occupancy(&self, ix: usize, iy: usize, ch: usize) -> u32 {
        self.occupancy[self.flat(ix, iy, ch)]
    }

    pub fn mean_intensity(&self, ix: usize, iy: usize, ch: usize) -> f64 {
        self.mean_intensity[self.flat(ix, iy, ch)]
    }

    pub fn occupancy_raw(&self) -> &[u32] {
        &self.occupancy
    }

    pub fn mean_intensity_raw(&self) -> &[f64] {
        &self.mean_intensity
    }

    /// Points that fell outside the volume during voxelization.
    pub fn dropped_points(&self) -> usize {
        self.dropped_points
    }

    pub fn total_occupancy(&self) -> u64 {
        self.occupancy.iter().map(|&c| c as u64).sum()
    }
}

/// Keep points strictly above the cut plane; order-preserving.
pub fn remove_ground(cloud: &PointCloud, z_cut: f64) -> PointCloud {
    PointCloud::new(
        cloud
            .points
            .iter()
            .filter(|p| (p.z as f64) > z_cut)
            .copied()
            .collect(),
    )
}

/// Coarse voxel filter: searches for the voxel size whose occupied-voxel
/// count is the largest value not exceeding `target`, then emits one point
/// per occupied voxel at the centroid with the mean intensity. Clouds at or
/// under `target` points pass through unchanged.
pub fn voxel_downsample(cloud: &PointCloud, target: usize) -> PointCloud {
    voxel_downsample_detailed(cloud, target).0
}

/// As [`voxel_downsample`], also returning the voxel size the search settled
/// on (0.0 when the cloud passed through unchanged).
pub fn voxel_downsample_detailed(cloud: &PointCloud, target: usize) -> (PointCloud, f64) {
    assert!(target >= 1, "target must be >= 1");
    if cloud.points.len() <= target {
        return (cloud.clone(), 0.0);
    }

    let (min, max) = bounding_box(&cloud.points);
    let extent = (max.0 - min.0).max(max.1 - min.1).max(max.2 - min.2);
    if extent <= 0.0 {
        // All points coincide; one voxel regardless of size.
        let merged = centroids(&cloud.points, min, 1.0);
        return (PointCloud::new(merged), 1.0);
    }

    // Occupied-voxel count decreases (monotonically up to aliasing) with
    // voxel size; bisect between "every point separate" and "one voxel".
    let mut lo = 1e-9;
    let mut hi = extent * (1.0 + 1e-9) + 1e-9;
    let mut best: Option<(usize, f64)> = None;
    for _ in 0..48 {
        let mid = 0.5 * (lo + hi);
        let count = occupied_count(&cloud.points, min, mid);
        if count > target {
            lo = mid;
        } else {
            if best.map_or(true, |(c, _)| count > c) {
                best = Some((count, mid));
            }
            hi = mid;
            if count == target {
                break;
            }
        }
    }
    let (_, size) = best.expect("single-voxel size always admissible");
    (PointCloud::new(centroids(&cloud.points, min, size)), size)
}

fn bounding_box(points: &[Point]) -> ((f64, f64, f64), (f64, f64, f64)) {
    let mut min = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut max = (f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        min.0 = min.0.min(p.x as f64);
        min.1 = min.1.min(p.y as f64);
        min.2 = min.2.min(p.z as f64);
        max.0 = max.0.max(p.x as f64);
        max.1 = max.1.max(p.y as f64);
        max.2 = max.2.max(p.z as f64);
    }
    (min, max)
}

fn voxel_key(p: &Point, anchor: (f64, f64, f64), size: f64) -> (i64, i64, i64) {
    (
        ((p.x as f64 - anchor.0) / size).floor() as i64,
        ((p.y as f64 - anchor.1) / size).floor() as i64,
        ((p.z as f64 - anchor.2) / size).floor() as i64,
    )
}

fn occupied_count(points: &[Point], anchor: (f64, f64, f64), size: f64) -> usize {
    let mut seen = std::collections::HashSet::with_capacity(points.len());
    for p in points {
        seen.insert(voxel_key(p, anchor, size));
    }
    seen.len()
}

fn centroids(points: &[Point], anchor: (f64, f64, f64), size: f64) -> Vec<Point> {
    let mut acc: HashMap<(i64, i64, i64), (f64, f64, f64, f64, u64)> = HashMap::new();
    for p in points {
        let e = acc.entry(voxel_key(p, anchor, size)).or_insert((0.0, 0.0, 0.0, 0.0, 0));
        e.0 += p.x as f64;
        e.1 += p.y as f64;
        e.2 += p.z as f64;
        e.3 += p.intensity as f64;
        e.4 += 1;
    }
    let mut keys: Vec<_> = acc.keys().copied().collect();
    keys.sort_unstable();
    keys.into_iter()
        .map(|k| {
            let (sx, sy, sz, si, n) = acc[&k];
            let n = n as f64;
            Point::new(
                (sx / n) as f32,
                (sy / n) as f32,
                (sz / n) as f32,
                (si / n) as f32,
            )
        })
        .collect()
}

/// Bin a sensor-frame cloud into the BEV volume. Out-of-bounds points are
/// counted in `dropped_points`; each occupied voxel gets the mean intensity
/// of its contributing points.
pub fn voxelize(cloud: &PointCloud, spec: &GridSpec) -> BEVGrid {
    let n = spec.voxel_count();
    let mut occupancy = vec![0u32; n];
    let mut intensity_sum = vec![0f64; n];
    let mut dropped = 0usize;
    let cells_y = spec.cells_y();
    let channels = spec.channels;
    for p in &cloud.points {
        match spec.bin(p.x as f64, p.y as f64, p.z as f64) {
            Some((ix, iy, iz)) => {
                let idx = (ix * cells_y + iy) * channels + iz;
                occupancy[idx] += 1;
                intensity_sum[idx] += p.intensity as f64;
            }
            None => dropped += 1,
        }
    }
    let mean_intensity = occupancy
        .iter()
        .zip(intensity_sum)
        .map(|(&c, s)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    BEVGrid {
        spec: *spec,
        occupancy,
        mean_intensity,
        dropped_points: dropped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(x: f32, y: f32, z: f32, i: f32) -> Point {
        Point::new(x, y, z, i)
    }

    #[test]
    fn oxford_preset_shape() {
        let spec = GridSpec::oxford();
        assert_eq!(spec.cells_x(), 320);
        assert_eq!(spec.cells_y(), 200);
        assert_eq!(spec.channels, 16);
    }

    #[test]
    fn pit30m_preset_shape() {
        let spec = GridSpec::pit30m();
        assert_eq!((spec.cells_x(), spec.cells_y(), spec.channels), (84, 52, 16));
    }

    #[test]
    fn remove_ground_threshold_semantics() {
        let cloud = PointCloud::new(vec![
            pt(0.0, 0.0, -0.1, 0.1),
            pt(0.0, 0.0, 0.0, 0.2),
            pt(0.0, 0.0, 0.5, 0.3),
        ]);
        let kept = remove_ground(&cloud, 0.2);
        assert_eq!(kept.points, vec![pt(0.0, 0.0, 0.5, 0.3)]);
        assert!(remove_ground(&PointCloud::default(), 0.2).is_empty());
    }

    #[test]
    fn remove_ground_matches_independent_scan() {
        let mut cloud = PointCloud::default();
        let mut state = 0x12345u64;
        for _ in 0..500 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let z = ((state >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0;
            cloud.points.push(pt(0.0, 0.0, z as f32, 0.5));
        }
        let z_cut = 0.3;
        let expected = cloud.points.iter().filter(|p| (p.z as f64) > z_cut).count();
        assert_eq!(remove_ground(&cloud, z_cut).len(), expected);
        // Idempotent on its own output.
        let once = remove_ground(&cloud, z_cut);
        assert_eq!(remove_ground(&once, z_cut), once);
    }

    #[test]
    fn downsample_under_target_is_identity() {
        let cloud = PointCloud::new((0..10).map(|i| pt(i as f32, 0.0, 0.0, 0.5)).collect());
        assert_eq!(voxel_downsample(&cloud, 4096), cloud);
    }

    #[test]
    fn downsample_cube_corners_to_single_centroid() {
        let corners: Vec<Point> = (0..8)
            .map(|i| {
                pt(
                    (i & 1) as f32,
                    ((i >> 1) & 1) as f32,
                    ((i >> 2) & 1) as f32,
                    1.0,
                )
            })
            .collect();
        let out = voxel_downsample(&PointCloud::new(corners), 1);
        assert_eq!(out.len(), 1);
        let p = out.points[0];
        assert!((p.x - 0.5).abs() < 1e-6 && (p.y - 0.5).abs() < 1e-6 && (p.z - 0.5).abs() < 1e-6);
    }

    #[test]
    fn downsample_random_cloud_rebucket_oracle() {
        let mut points = Vec::with_capacity(100_000);
        let mut state = 0xdeadbeefu64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..100_000 {
            points.push(pt(
                (next() * 100.0) as f32,
                (next() * 100.0) as f32,
                (next() * 10.0) as f32,
                next() as f32,
            ));
        }
        let cloud = PointCloud::new(points);
        let target = 4096;
        let (out, size) = voxel_downsample_detailed(&cloud, target);
        assert!(out.len() <= target, "{} > {}", out.len(), target);
        assert!(out.len() > target / 2, "{} too small", out.len());

        // Independent grouping pass at the reported size.
        let (min, _) = bounding_box(&cloud.points);
        let expected = centroids(&cloud.points, min, size);
        assert_eq!(out.points, expected);
    }

    #[test]
    fn voxelize_empty_cloud_is_all_zero() {
        let grid = voxelize(&PointCloud::default(), &GridSpec::desk());
        assert_eq!(grid.total_occupancy(), 0);
        assert!(grid.mean_intensity_raw().iter().all(|&v| v == 0.0));
        assert_eq!(grid.dropped_points(), 0);
    }

    #[test]
    fn voxelize_hand_binned_cells() {
        let spec = GridSpec::new(4.0, 4.0, 1.0, 4.0, 4, 0.0).unwrap();
        // Two points in one cell (intensities 0.2 and 0.6), one elsewhere.
        let cloud = PointCloud::new(vec![
            pt(0.5, 0.5, 0.5, 0.2),
            pt(0.6, 0.4, 0.7, 0.6),
            pt(-1.5, 1.5, 2.5, 1.0),
        ]);
        let grid = voxelize(&cloud, &spec);
        assert_eq!(grid.occupancy(2, 2, 0), 2);
        assert!((grid.mean_intensity(2, 2, 0) - 0.4).abs() < 1e-7);
        assert_eq!(grid.occupancy(0, 3, 2), 1);
        assert_eq!(grid.total_occupancy(), 3);
        assert_eq!(grid.dropped_points(), 0);
    }

    #[test]
    fn voxelize_edge_rules() {
        let spec = GridSpec::new(4.0, 4.0, 1.0, 4.0, 4, 0.0).unwrap();
        // Upper edges (x = 2.0, z = 4.0) are exclusive, lower edges inclusive.
        let cloud = PointCloud::new(vec![
            pt(2.0, 0.0, 1.0, 0.5),
            pt(-2.0, 0.0, 1.0, 0.5),
            pt(0.0, 0.0, 4.0, 0.5),
            pt(0.0, 0.0, 0.0, 0.5),
        ]);
        let grid = voxelize(&cloud, &spec);
        assert_eq!(grid.total_occupancy(), 2);
        assert_eq!(grid.dropped_points(), 2);
        assert_eq!(grid.occupancy(0, 2, 1), 1); // x=-2 -> cell 0
        assert_eq!(grid.occupancy(2, 2, 0), 1); // z=0 -> channel 0
    }

    #[test]
    fn grid_spec_rejects_fractional_cell_counts() {
        assert!(GridSpec::new(10.0, 10.0, 3.0, 4.0, 4, 0.0).is_err());
        assert!(GridSpec::new(10.0, 10.0, 2.0, 4.0, 0, 0.0).is_err());
    }
}
