//! Ray-cast LiDAR sweep simulation.
//!
//! Rays leave the sensor in a fixed azimuth x elevation pattern (azimuth
//! relative to the vehicle heading). The first ground or landmark
//! intersection within range yields a sensor-frame point whose intensity is
//! the surface reflectivity jittered by precipitation; precipitation also
//! drops returns. Clutter points from ephemeral dynamic objects are then
//! injected so the realized dynamic-point fraction matches the occlusion
//! tag exactly up to rounding.

use rand::Rng;

use crate::cloud::{Point, PointCloud};
use crate::error::{Error, Result};
use crate::geom::{to_sensor_frame, Pose};
use crate::seeds::rng_for;

use super::{ConditionTags, World, SENSOR_HEIGHT};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepConfig {
    pub rings: usize,
    pub azimuth_steps: usize,
    pub max_range_m: f64,
    pub min_elevation_deg: f64,
    pub max_elevation_deg: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            rings: 64,
            azimuth_steps: 360,
            max_range_m: 75.0,
            min_elevation_deg: -24.8,
            max_elevation_deg: 2.0,
        }
    }
}

/// A sweep with per-point dynamic-object labels (exact by construction).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSweep {
    pub cloud: PointCloud,
    pub dynamic: Vec<bool>,
}

impl LabeledSweep {
    pub fn dynamic_fraction(&self) -> f64 {
        if self.cloud.is_empty() {
            return 0.0;
        }
        self.dynamic.iter().filter(|&&d| d).count() as f64 / self.cloud.len() as f64
    }
}

pub fn simulate_sweep(
    world: &World,
    pose: &Pose,
    tags: &ConditionTags,
    seed: u64,
) -> Result<PointCloud> {
    simulate_sweep_labeled(world, pose, tags, seed, &SweepConfig::default()).map(|s| s.cloud)
}

pub fn simulate_sweep_with(
    world: &World,
    pose: &Pose,
    tags: &ConditionTags,
    seed: u64,
    config: &SweepConfig,
) -> Result<PointCloud> {
    simulate_sweep_labeled(world, pose, tags, seed, config).map(|s| s.cloud)
}

pub fn simulate_sweep_labeled(
    world: &World,
    pose: &Pose,
    tags: &ConditionTags,
    seed: u64,
    config: &SweepConfig,
) -> Result<LabeledSweep> {
    if !world.contains(pose.x, pose.y) {
        return Err(Error::PoseOutsideWorld {
            x: pose.x,
            y: pose.y,
        });
    }
    tags.validate()?;
    let mut rng = rng_for(seed, "sweep", pose.reading_id);

    let origin = (pose.x, pose.y, SENSOR_HEIGHT);
    let nearby = world.landmarks_near(pose.x, pose.y, config.max_range_m);

    let dropout_p = (0.05 * tags.precipitation_mm).min(0.6);
    let jitter_sigma = 0.03 * tags.precipitation_mm;

    let mut points = Vec::with_capacity(config.rings * config.azimuth_steps / 2);
    for ring in 0..config.rings {
        let el = if config.rings == 1 {
            config.min_elevation_deg
        } else {
            config.min_elevation_deg
                + (config.max_elevation_deg - config.min_elevation_deg) * ring as f64
                    / (config.rings - 1) as f64
        };
        let (el_sin, el_cos) = el.to_radians().sin_cos();
        for step in 0..config.azimuth_steps {
            let az = pose.heading + 360.0 * step as f64 / config.azimuth_steps as f64;
            let (az_sin, az_cos) = az.to_radians().sin_cos();
            let dir = (el_cos * az_cos, el_cos * az_sin, el_sin);

            let mut hit: Option<(f64, f64)> = None; // (t, reflectivity)
            if dir.2 < 0.0 {
                let t = -origin.2 / dir.2;
                if t <= config.max_range_m {
                    hit = Some((t, world.spec.ground_reflectivity));
                }
            }
            for &li in &nearby {
                let l = &world.landmarks[li];
                if let Some(t) = ray_box(origin, dir, l) {
                    if t <= config.max_range_m && hit.map_or(true, |(bt, _)| t < bt) {
                        hit = Some((t, l.reflectivity));
                    }
                }
            }
            let Some((t, reflectivity)) = hit else {
                continue;
            };

            let mut intensity = reflectivity;
            if tags.precipitation_mm > 0.0 {
                if rng.random_range(0.0..1.0) < dropout_p {
                    continue;
                }
                intensity += gaussian(&mut rng) * jitter_sigma;
            }
            let world_pt = (
                origin.0 + t * dir.0,
                origin.1 + t * dir.1,
                origin.2 + t * dir.2,
            );
            let (sx, sy, sz) = to_sensor_frame(world_pt, pose);
            points.push(Point::new(
                sx as f32,
                sy as f32,
                sz as f32,
                intensity.clamp(0.0, 1.0) as f32,
            ));
        }
    }

    let n_static = points.len();
    let mut dynamic = vec![false; n_static];
    let q = (tags.lidar_occlusion_pct / 100.0).min(0.9);
    if q > 0.0 && n_static > 0 {
        let n_clutter = (n_static as f64 * q / (1.0 - q)).round() as usize;
        inject_clutter(&mut points, &mut dynamic, n_clutter, &mut rng);
    }

    Ok(LabeledSweep {
        cloud: PointCloud::new(points),
        dynamic,
    })
}

/// Clutter points sampled on the surfaces of short boxes placed on the road
/// ahead of the sensor, in sensor-frame coordinates.
fn inject_clutter(
    points: &mut Vec<Point>,
    dynamic: &mut Vec<bool>,
    n_clutter: usize,
    rng: &mut impl Rng,
) {
    if n_clutter == 0 {
        return;
    }
    let n_objects = n_clutter.div_ceil(350).max(1);
    let mut boxes = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let cx = rng.random_range(4.0..30.0);
        let cy = rng.random_range(-4.0..4.0);
        let half_x = rng.random_range(0.75..2.25);
        let half_y = rng.random_range(0.75..2.25);
        let height = rng.random_range(1.0..2.2);
        boxes.push((cx, cy, half_x, half_y, height));
    }
    for i in 0..n_clutter {
        let (cx, cy, hx, hy, h) = boxes[i % boxes.len()];
        // Faces: -x, +x, -y, +y, top.
        let face = rng.random_range(0..5);
        let u: f64 = rng.random_range(-1.0..1.0);
        let v: f64 = rng.random_range(0.0..1.0);
        let (x, y, z) = match face {
            0 => (cx - hx, cy + u * hy, v * h),
            1 => (cx + hx, cy + u * hy, v * h),
            2 => (cx + u * hx, cy - hy, v * h),
            3 => (cx + u * hx, cy + hy, v * h),
            _ => (cx + u * hx, cy + (2.0 * v - 1.0) * hy, h),
        };
        let intensity = rng.random_range(0.1..0.9);
        // Same frame as static returns: z measured from the ground plane.
        points.push(Point::new(x as f32, y as f32, z as f32, intensity as f32));
        dynamic.push(true);
    }
}

/// Slab test against an axis-aligned box standing on the ground plane.
/// Returns the entry distance when the ray starts outside and hits.
fn ray_box(origin: (f64, f64, f64), dir: (f64, f64, f64), l: &super::Landmark) -> Option<f64> {
    let bounds = [
        (l.cx - l.half_x, l.cx + l.half_x),
        (l.cy - l.half_y, l.cy + l.half_y),
        (0.0, l.height),
    ];
    let o = [origin.0, origin.1, origin.2];
    let d = [dir.0, dir.1, dir.2];
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for axis in 0..3 {
        if d[axis].abs() < 1e-15 {
            if o[axis] < bounds[axis].0 || o[axis] > bounds[axis].1 {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[axis];
        let mut t0 = (bounds[axis].0 - o[axis]) * inv;
        let mut t1 = (bounds[axis].1 - o[axis]) * inv;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    (t_near > 1e-9).then_some(t_near)
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::from_sensor_frame;
    use crate::synth::{generate_world, WorldSpec};

    fn clear_tags() -> ConditionTags {
        ConditionTags {
            precipitation_mm: 0.0,
            lidar_occlusion_pct: 0.0,
            ..ConditionTags::default()
        }
    }

    fn test_world() -> World {
        generate_world(&WorldSpec {
            seed: 5,
            extent_x: 200.0,
            extent_y: 200.0,
            lattice_pitch: 50.0,
            landmark_count: 20,
            ..WorldSpec::default()
        })
        .unwrap()
    }

    fn pose_at(x: f64, y: f64, heading: f64) -> Pose {
        Pose::new(x, y, heading, 1, 0.0, 42)
    }

    #[test]
    fn clear_conditions_are_deterministic_with_no_clutter() {
        let world = test_world();
        let pose = pose_at(50.0, 50.0, 30.0);
        let cfg = SweepConfig {
            rings: 16,
            azimuth_steps: 90,
            ..SweepConfig::default()
        };
        let a = simulate_sweep_labeled(&world, &pose, &clear_tags(), 7, &cfg).unwrap();
        let b = simulate_sweep_labeled(&world, &pose, &clear_tags(), 7, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dynamic_fraction(), 0.0);
        assert!(!a.cloud.is_empty());
    }

    #[test]
    fn single_landmark_points_lie_on_its_faces() {
        let spec = WorldSpec {
            seed: 1,
            extent_x: 100.0,
            extent_y: 100.0,
            lattice_pitch: 100.0,
            landmark_count: 0,
            ..WorldSpec::default()
        };
        let mut world = generate_world(&spec).unwrap();
        let landmark = crate::synth::Landmark {
            cx: 60.0,
            cy: 50.0,
            half_x: 2.0,
            half_y: 3.0,
            height: 5.0,
            reflectivity: 0.75,
        };
        world.landmarks.push(landmark);
        // Rebuild lookup structures by write/read round trip.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.pitw");
        crate::synth::write_world(&path, &world).unwrap();
        let world = crate::synth::read_world(&path).unwrap();

        let pose = pose_at(50.0, 50.0, 0.0);
        let cfg = SweepConfig {
            rings: 24,
            azimuth_steps: 240,
            ..SweepConfig::default()
        };
        let sweep = simulate_sweep_labeled(&world, &pose, &clear_tags(), 3, &cfg).unwrap();
        let mut on_box = 0;
        for p in &sweep.cloud.points {
            let w = from_sensor_frame((p.x as f64, p.y as f64, p.z as f64), &pose);
            let on_ground = w.2.abs() < 1e-6;
            if on_ground {
                continue;
            }
            // Every non-ground hit must lie on a face of the box.
            let eps = 1e-6;
            let inside_x = w.0 >= landmark.cx - landmark.half_x - eps
                && w.0 <= landmark.cx + landmark.half_x + eps;
            let inside_y = w.1 >= landmark.cy - landmark.half_y - eps
                && w.1 <= landmark.cy + landmark.half_y + eps;
            let inside_z = w.2 >= -eps && w.2 <= landmark.height + eps;
            let on_face_x = (w.0 - (landmark.cx - landmark.half_x)).abs() < eps
                || (w.0 - (landmark.cx + landmark.half_x)).abs() < eps;
            let on_face_y = (w.1 - (landmark.cy - landmark.half_y)).abs() < eps
                || (w.1 - (landmark.cy + landmark.half_y)).abs() < eps;
            let on_face_z = (w.2 - landmark.height).abs() < eps;
            assert!(inside_x && inside_y && inside_z, "point off the box: {w:?}");
            assert!(on_face_x || on_face_y || on_face_z, "point inside the box: {w:?}");
            assert!((p.intensity - 0.75).abs() < 1e-6);
            on_box += 1;
        }
        assert!(on_box > 10, "expected face hits, got {on_box}");
    }

    #[test]
    fn occlusion_tag_realized_within_rounding() {
        let world = test_world();
        let pose = pose_at(100.0, 100.0, 90.0);
        let tags = ConditionTags {
            lidar_occlusion_pct: 20.0,
            ..clear_tags()
        };
        let cfg = SweepConfig {
            rings: 64,
            azimuth_steps: 250,
            ..SweepConfig::default()
        };
        let sweep = simulate_sweep_labeled(&world, &pose, &tags, 11, &cfg).unwrap();
        assert!(sweep.cloud.len() >= 10_000, "sweep too small: {}", sweep.cloud.len());
        let realized = sweep.dynamic_fraction();
        assert!(
            (realized - 0.20).abs() <= 0.003,
            "occlusion fraction {realized} misses the tag"
        );
    }

    #[test]
    fn pose_outside_world_is_an_error() {
        let world = test_world();
        let pose = pose_at(-10.0, 50.0, 0.0);
        assert!(matches!(
            simulate_sweep(&world, &pose, &clear_tags(), 0),
            Err(Error::PoseOutsideWorld { .. })
        ));
    }

    #[test]
    fn same_place_different_conditions_share_static_geometry() {
        let world = test_world();
        let pose = pose_at(50.0, 100.0, 180.0);
        let cfg = SweepConfig {
            rings: 16,
            azimuth_steps: 120,
            ..SweepConfig::default()
        };
        let clear = simulate_sweep_labeled(&world, &pose, &clear_tags(), 21, &cfg).unwrap();
        let dirty_tags = ConditionTags {
            lidar_occlusion_pct: 15.0,
            precipitation_mm: 0.0,
            ..clear_tags()
        };
        let dirty = simulate_sweep_labeled(&world, &pose, &dirty_tags, 22, &cfg).unwrap();
        // Without precipitation dropout, static points agree exactly.
        let static_dirty: Vec<_> = dirty
            .cloud
            .points
            .iter()
            .zip(&dirty.dynamic)
            .filter(|(_, &d)| !d)
            .map(|(p, _)| *p)
            .collect();
        assert_eq!(clear.cloud.points, static_dirty);
    }
}
