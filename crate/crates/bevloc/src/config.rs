//! Flat run configuration: `key = value` lines, `#` comments, unknown keys
//! rejected. Every command echoes the fully resolved configuration
//! (defaults included) to a sidecar file, so any artifact can be reproduced
//! from its sidecar alone.

use std::path::{Path, PathBuf};

use crate::bev::GridSpec;
use crate::error::{Error, Result};
use crate::learn::{BatchMode, MiningRules, TrainConfig};
use crate::synth::{calibrate_gps_sigma, GpsModel, SweepConfig, WorldSpec};

macro_rules! run_config {
    ($( $key:literal => $field:ident : $ty:ty = $default:expr ; )*) => {
        /// Fully resolved configuration for every pipeline command.
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $( pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $( $field: $default, )* }
            }
        }

        impl RunConfig {
            /// Apply one `key = value` assignment. Unknown keys are errors.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( $key => {
                        self.$field = parse_value::<$ty>(key, value)?;
                        Ok(())
                    } )*
                    other => Err(Error::Config(format!("unknown key `{other}`"))),
                }
            }

            /// Canonical sorted (key, value) listing of the resolved state.
            pub fn to_pairs(&self) -> Vec<(String, String)> {
                let mut pairs = vec![
                    $( ($key.to_string(), format_value(&self.$field)), )*
                ];
                pairs.sort();
                pairs
            }
        }
    };
}

trait ConfigValue: Sized {
    fn parse_config(s: &str) -> Option<Self>;
    fn format_config(&self) -> String;
}

impl ConfigValue for String {
    fn parse_config(s: &str) -> Option<Self> {
        Some(s.to_string())
    }
    fn format_config(&self) -> String {
        self.clone()
    }
}

impl ConfigValue for f64 {
    fn parse_config(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn format_config(&self) -> String {
        format!("{self}")
    }
}

impl ConfigValue for u64 {
    fn parse_config(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn format_config(&self) -> String {
        format!("{self}")
    }
}

impl ConfigValue for usize {
    fn parse_config(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn format_config(&self) -> String {
        format!("{self}")
    }
}

impl ConfigValue for u32 {
    fn parse_config(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn format_config(&self) -> String {
        format!("{self}")
    }
}

impl ConfigValue for bool {
    fn parse_config(s: &str) -> Option<Self> {
        match s {
            "true" | "1" | "yes" | "on" => Some(true),
            "false" | "0" | "no" | "off" => Some(false),
            _ => None,
        }
    }
    fn format_config(&self) -> String {
        format!("{self}")
    }
}

fn parse_value<T: ConfigValue>(key: &str, value: &str) -> Result<T> {
    T::parse_config(value.trim())
        .ok_or_else(|| Error::Config(format!("cannot parse value `{value}` for key `{key}`")))
}

fn format_value<T: ConfigValue>(v: &T) -> String {
    v.format_config()
}

run_config! {
    "out_dir" => out_dir: String = "out".to_string();
    "seed" => seed: u64 = 0;
    "workers" => workers: usize = 0;
    "method" => method: String = "learned".to_string();

    "world.extent_x" => world_extent_x: f64 = 500.0;
    "world.extent_y" => world_extent_y: f64 = 500.0;
    "world.lattice_pitch" => world_lattice_pitch: f64 = 50.0;
    "world.landmark_count" => world_landmark_count: usize = 160;
    "world.footprint_min" => world_footprint_min: f64 = 4.0;
    "world.footprint_max" => world_footprint_max: f64 = 14.0;
    "world.height_min" => world_height_min: f64 = 3.0;
    "world.height_max" => world_height_max: f64 = 12.0;
    "world.reflectivity_min" => world_reflectivity_min: f64 = 0.2;
    "world.reflectivity_max" => world_reflectivity_max: f64 = 0.9;
    "world.ground_reflectivity" => world_ground_reflectivity: f64 = 0.3;

    "trips" => trips: usize = 8;
    "trip.length_m" => trip_length_m: f64 = 600.0;
    "trip.spacing_m" => trip_spacing_m: f64 = 1.0;
    "trip.mode" => trip_mode: String = "circuit".to_string();
    "trip.lane_jitter_m" => trip_lane_jitter_m: f64 = 0.3;

    "tags.occlusion_max_pct" => tags_occlusion_max_pct: f64 = 20.0;
    "tags.precipitation_max_mm" => tags_precipitation_max_mm: f64 = 6.0;

    "synth.clouds" => synth_clouds: bool = true;
    "sweep.rings" => sweep_rings: usize = 32;
    "sweep.azimuth_steps" => sweep_azimuth_steps: usize = 180;
    "sweep.max_range_m" => sweep_max_range_m: f64 = 75.0;
    "sweep.min_elevation_deg" => sweep_min_elevation_deg: f64 = -25.0;
    "sweep.max_elevation_deg" => sweep_max_elevation_deg: f64 = 3.0;

    "gps.sigma_m" => gps_sigma_m: f64 = -1.0;
    "gps.target_median_m" => gps_target_median_m: f64 = 3.4;
    "gps.bias_std_m" => gps_bias_std_m: f64 = 0.5;

    "bev.preset" => bev_preset: String = "desk".to_string();
    "bev.extent_x" => bev_extent_x: f64 = 80.0;
    "bev.extent_y" => bev_extent_y: f64 = 80.0;
    "bev.resolution" => bev_resolution: f64 = 1.0;
    "bev.z_extent" => bev_z_extent: f64 = 6.4;
    "bev.channels" => bev_channels: usize = 16;
    "bev.z_offset" => bev_z_offset: f64 = -0.5;

    "ground.z_cut" => ground_z_cut: f64 = 0.3;
    "downsample.target" => downsample_target: usize = 4096;

    "model.hidden" => model_hidden: usize = 128;
    "model.out_dim" => model_out_dim: usize = 256;

    "vlad.k" => vlad_k: usize = 128;
    "vlad.kmeans_iters" => vlad_kmeans_iters: usize = 50;
    "vlad.train_subset" => vlad_train_subset: usize = 400;

    "mine.positive_radius_m" => mine_positive_radius_m: f64 = 1.0;
    "mine.negative_min_m" => mine_negative_min_m: f64 = 2.0;
    "mine.negative_max_m" => mine_negative_max_m: f64 = 4.0;
    "mine.heading_window_deg" => mine_heading_window_deg: f64 = 30.0;
    "mine.cross_trip" => mine_cross_trip: bool = true;
    "mine.margin" => mine_margin: f64 = 0.5;

    "train.learning_rate" => train_learning_rate: f64 = 0.001;
    "train.decay_factor" => train_decay_factor: f64 = 10.0;
    "train.mode" => train_mode: String = "triplet".to_string();
    "train.batch_size" => train_batch_size: usize = 16;
    "train.quad_positives" => train_quad_positives: usize = 2;
    "train.quad_negatives" => train_quad_negatives: usize = 18;
    "train.cache_refresh" => train_cache_refresh: u64 = 1000;
    "train.max_iterations" => train_max_iterations: u64 = 4000;
    "train.patience" => train_patience: u32 = 3;
    "train.min_improvement_pp" => train_min_improvement_pp: f64 = 0.1;
    "train.beta_margin" => train_beta_margin: f64 = 0.25;
    "train.val_query_cap" => train_val_query_cap: usize = 200;

    "split.train_pct" => split_train_pct: f64 = 70.0;
    "split.val_pct" => split_val_pct: f64 = 10.0;

    "eval.queries" => eval_queries: usize = 10000;
    "eval.mode" => eval_mode: String = "gps".to_string();
    "eval.tau_m" => eval_tau_m: f64 = 20.0;
    "eval.thresholds_m" => eval_thresholds_m: String = "0.25,0.5,1,5".to_string();
    "eval.correct_radius_m" => eval_correct_radius_m: f64 = 25.0;
    "eval.sun_degradation" => eval_sun_degradation: f64 = 0.0;

    "query.k" => query_k: usize = 5;
    "query.use_gps" => query_use_gps: bool = false;
    "query.gps_x" => query_gps_x: f64 = 0.0;
    "query.gps_y" => query_gps_y: f64 = 0.0;

    "analysis.failure_threshold_m" => analysis_failure_threshold_m: f64 = 2.0;
    "analysis.gps_filter_m" => analysis_gps_filter_m: f64 = 20.0;
    "analysis.reports" => analysis_reports: String = String::new();
    "analysis.bins" => analysis_bins: String =
        "lidar_occlusion_pct:0,5,10,15,20,25;sun_angle_deg:-10,0,10,20,30,45,60,90".to_string();
}

impl RunConfig {
    /// Parse a config file and apply it over the defaults.
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = RunConfig::default();
        config.apply_text(&text, Some(path))?;
        Ok(config)
    }

    pub fn apply_text(&mut self, text: &str, path: Option<&Path>) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                let loc = path
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "<config>".into());
                return Err(Error::Config(format!(
                    "{loc}:{}: expected `key = value`, got `{line}`",
                    idx + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Apply `--set key=value` overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for entry in overrides {
            let Some((key, value)) = entry.split_once('=') else {
                return Err(Error::Config(format!(
                    "override `{entry}` is not key=value"
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_pairs() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out_dir)
    }

    pub fn world_spec(&self) -> WorldSpec {
        WorldSpec {
            seed: self.seed,
            extent_x: self.world_extent_x,
            extent_y: self.world_extent_y,
            lattice_pitch: self.world_lattice_pitch,
            landmark_count: self.world_landmark_count,
            footprint_range: (self.world_footprint_min, self.world_footprint_max),
            height_range: (self.world_height_min, self.world_height_max),
            reflectivity_range: (self.world_reflectivity_min, self.world_reflectivity_max),
            ground_reflectivity: self.world_ground_reflectivity,
        }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            rings: self.sweep_rings,
            azimuth_steps: self.sweep_azimuth_steps,
            max_range_m: self.sweep_max_range_m,
            min_elevation_deg: self.sweep_min_elevation_deg,
            max_elevation_deg: self.sweep_max_elevation_deg,
        }
    }

    /// Explicit sigma when non-negative, otherwise calibrated from the
    /// median target.
    pub fn gps_model(&self) -> Result<GpsModel> {
        let sigma_m = if self.gps_sigma_m >= 0.0 {
            self.gps_sigma_m
        } else {
            calibrate_gps_sigma(self.gps_target_median_m)?
        };
        Ok(GpsModel {
            sigma_m,
            bias_std_m: self.gps_bias_std_m,
        })
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        match self.bev_preset.as_str() {
            "custom" => GridSpec::new(
                self.bev_extent_x,
                self.bev_extent_y,
                self.bev_resolution,
                self.bev_z_extent,
                self.bev_channels,
                self.bev_z_offset,
            ),
            name => GridSpec::by_name(name),
        }
    }

    pub fn mining_rules(&self) -> MiningRules {
        MiningRules {
            positive_radius: self.mine_positive_radius_m,
            negative_min: self.mine_negative_min_m,
            negative_max: self.mine_negative_max_m,
            heading_window: self.mine_heading_window_deg,
            cross_trip: self.mine_cross_trip,
            margin: self.mine_margin,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let batch = match self.train_mode.as_str() {
            "triplet" => BatchMode::Triplet {
                size: self.train_batch_size,
            },
            "quadruplet" => BatchMode::Quadruplet {
                positives: self.train_quad_positives,
                negatives: self.train_quad_negatives,
            },
            other => {
                return Err(Error::Config(format!(
                    "train.mode must be triplet|quadruplet, got `{other}`"
                )))
            }
        };
        Ok(TrainConfig {
            learning_rate: self.train_learning_rate,
            plateau_decay: self.train_decay_factor,
            batch,
            cache_refresh_interval: self.train_cache_refresh,
            max_iterations: self.train_max_iterations,
            seed: self.seed,
            patience: self.train_patience,
            min_improvement_pp: self.train_min_improvement_pp,
            quadruplet_beta: self.train_beta_margin,
            val_query_cap: self.train_val_query_cap,
        })
    }

    pub fn eval_thresholds(&self) -> Result<Vec<f64>> {
        parse_f64_list(&self.eval_thresholds_m)
    }

    /// Parsed `analysis.bins`: (tag column, edges) pairs.
    pub fn analysis_bin_specs(&self) -> Result<Vec<(String, Vec<f64>)>> {
        let mut out = Vec::new();
        for part in self.analysis_bins.split(';') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let Some((tag, edges)) = part.split_once(':') else {
                return Err(Error::Config(format!(
                    "analysis.bins entry `{part}` is not tag:edge,edge,..."
                )));
            };
            out.push((tag.trim().to_string(), parse_f64_list(edges)?));
        }
        Ok(out)
    }

    /// Parsed `analysis.reports`: (method name, report path) pairs; empty
    /// means "the single report in out_dir under the configured method".
    pub fn analysis_report_specs(&self) -> Result<Vec<(String, PathBuf)>> {
        let mut out = Vec::new();
        for part in self.analysis_reports.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let Some((name, path)) = part.split_once('=') else {
                return Err(Error::Config(format!(
                    "analysis.reports entry `{part}` is not name=path"
                )));
            };
            out.push((name.trim().to_string(), PathBuf::from(path.trim())));
        }
        Ok(out)
    }
}

pub fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("cannot parse `{p}` as a number")))
        })
        .collect()
}
