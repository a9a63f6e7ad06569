//! Deterministic synthetic city and sensor simulator: road lattice,
//! box landmarks, ray-cast LiDAR sweeps, GPS noise and per-reading
//! condition metadata. The tuple (WorldSpec, trips, GpsModel, master seed)
//! reproduces every byte of generated data.

mod sweep;
mod trip;
mod world;

pub use sweep::{
    simulate_sweep, simulate_sweep_labeled, simulate_sweep_with, LabeledSweep, SweepConfig,
};
pub use trip::{
    calibrate_gps_sigma, lattice_circuit_path, offset_path, read_gps_csv, read_metadata_csv,
    simulate_trip, simulate_trip_readings, write_gps_csv, write_metadata_csv, TripData,
    TripReadings,
};
pub use world::{generate_world, read_world, write_world, Landmark, RoadGraph, World};

use crate::error::{Error, Result};

/// Height of the sensor above the road surface, metres.
pub const SENSOR_HEIGHT: f64 = 2.0;

/// Parameters of the synthetic city.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub seed: u64,
    pub extent_x: f64,
    pub extent_y: f64,
    /// Road lattice pitch: streets run along x = i*pitch and y = j*pitch.
    pub lattice_pitch: f64,
    pub landmark_count: usize,
    /// Box side-length range (full widths).
    pub footprint_range: (f64, f64),
    pub height_range: (f64, f64),
    pub reflectivity_range: (f64, f64),
    pub ground_reflectivity: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            seed: 0,
            extent_x: 500.0,
            extent_y: 500.0,
            lattice_pitch: 50.0,
            landmark_count: 160,
            footprint_range: (4.0, 14.0),
            height_range: (3.0, 12.0),
            reflectivity_range: (0.2, 0.9),
            ground_reflectivity: 0.3,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.extent_x > 0.0 && self.extent_y > 0.0 && self.lattice_pitch > 0.0) {
            return Err(Error::InvalidParameter(
                "world extent and lattice pitch must be positive".into(),
            ));
        }
        for (lo, hi) in [
            self.footprint_range,
            self.height_range,
            self.reflectivity_range,
        ] {
            if !(lo > 0.0 && hi >= lo) {
                return Err(Error::InvalidParameter(
                    "world geometry ranges must be positive and ordered".into(),
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.reflectivity_range.0)
            || !(0.0..=1.0).contains(&self.reflectivity_range.1)
            || !(0.0..=1.0).contains(&self.ground_reflectivity)
        {
            return Err(Error::InvalidParameter(
                "reflectivity must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Per-reading condition tags, mirroring the metadata schema.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionTags {
    /// Degrees between the horizon and the centre of the sun.
    pub sun_angle_deg: f64,
    pub precipitation_mm: f64,
    pub visibility_km: f64,
    pub uv_index: u32,
    pub temperature_c: f64,
    pub humidity_pct: f64,
    pub cloud_cover_pct: f64,
    pub wind_speed_mps: f64,
    pub image_occlusion_pct: f64,
    /// Percent of LiDAR points taken by dynamic objects.
    pub lidar_occlusion_pct: f64,
    pub construction_pct: f64,
}

impl Default for ConditionTags {
    fn default() -> Self {
        ConditionTags {
            sun_angle_deg: 35.0,
            precipitation_mm: 0.0,
            visibility_km: 10.0,
            uv_index: 5,
            temperature_c: 15.0,
            humidity_pct: 50.0,
            cloud_cover_pct: 20.0,
            wind_speed_mps: 3.0,
            image_occlusion_pct: 5.0,
            lidar_occlusion_pct: 0.0,
            construction_pct: 0.0,
        }
    }
}

impl ConditionTags {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("humidity_pct", self.humidity_pct),
            ("cloud_cover_pct", self.cloud_cover_pct),
            ("image_occlusion_pct", self.image_occlusion_pct),
            ("lidar_occlusion_pct", self.lidar_occlusion_pct),
            ("construction_pct", self.construction_pct),
        ] {
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must lie in [0, 100], got {v}"
                )));
            }
        }
        if self.visibility_km < 0.0 {
            return Err(Error::InvalidParameter("visibility must be >= 0".into()));
        }
        Ok(())
    }
}

/// GPS noise model: isotropic Gaussian per axis plus a per-trip bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpsModel {
    pub sigma_m: f64,
    pub bias_std_m: f64,
}

impl Default for GpsModel {
    fn default() -> Self {
        GpsModel {
            sigma_m: calibrate_gps_sigma(3.4).expect("positive target"),
            bias_std_m: 0.0,
        }
    }
}

/// Waypoint path for one trip, traversed at fixed reading spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct TripSpec {
    pub trip_id: u64,
    pub path: Vec<(f64, f64)>,
    pub spacing_m: f64,
    pub conditions: ConditionTags,
}

impl TripSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.spacing_m > 0.0) {
            return Err(Error::InvalidParameter("spacing must be positive".into()));
        }
        if self.path.len() < 2 {
            return Err(Error::InvalidParameter(
                "trip path needs at least two waypoints".into(),
            ));
        }
        self.conditions.validate()
    }
}
