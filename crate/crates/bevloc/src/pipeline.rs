//! Command implementations behind the CLI: synth, build-db, train, query,
//! eval, analyze. Each command resolves its inputs from a [`RunConfig`],
//! writes its outputs under `out_dir`, and echoes the fully resolved
//! configuration to `<out_dir>/<command>.resolved.cfg`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::analysis::{
    binned_summary, gps_filter, oracle_fusion_error, pearson_matrix, write_correlations_csv,
    AnalysisTable, BinStatistic, TAG_COLUMNS,
};
use crate::bev::{remove_ground, voxel_downsample, voxelize, BEVGrid};
use crate::cloud::{read_point_cloud, write_point_cloud, PointCloud};
use crate::config::RunConfig;
use crate::descriptor::{
    bev_feature_dim, bev_feature_vector, bev_local_features, embed_features, kmeans_fit,
    read_model, read_vocabulary, vlad_pool, write_model, write_vocabulary, Descriptor,
    EmbeddingModel, LocalFeatureSet, Vocabulary,
};
use crate::error::{Error, Result};
use crate::eval::{
    make_split, run_benchmark, write_curve_csv, write_report_csv, write_summary, EvalConfig,
    EvalMethod, EvalQuery, EvalSplit,
};
use crate::geom::{read_pose_csv, write_pose_csv, GpsFix, Pose};
use crate::index::{save_database, Database, LocRecord, RetrievalHit, DEFAULT_GRID_CELL_M};
use crate::learn::{train, write_train_log, TrainDataset};
use crate::seeds::{derive_seed, rng_for};
use crate::synth::{
    generate_world, lattice_circuit_path, offset_path, read_gps_csv, read_metadata_csv,
    simulate_trip_readings, simulate_sweep_labeled, write_gps_csv, write_metadata_csv,
    write_world, ConditionTags, TripSpec, World,
};

/// Standard artifact locations inside the output directory.
#[derive(Debug, Clone)]
pub struct OutPaths {
    dir: PathBuf,
}

impl OutPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        OutPaths { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn world(&self) -> PathBuf {
        self.dir.join("world.pitw")
    }
    pub fn poses(&self) -> PathBuf {
        self.dir.join("poses.csv")
    }
    pub fn gps(&self) -> PathBuf {
        self.dir.join("gps.csv")
    }
    pub fn metadata(&self) -> PathBuf {
        self.dir.join("metadata.csv")
    }
    pub fn clouds_dir(&self) -> PathBuf {
        self.dir.join("clouds")
    }
    pub fn cloud(&self, reading_id: u64) -> PathBuf {
        self.clouds_dir().join(format!("{reading_id}.pitc"))
    }
    pub fn model(&self) -> PathBuf {
        self.dir.join("model.pitm")
    }
    pub fn train_log(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }
    pub fn vocab(&self) -> PathBuf {
        self.dir.join("vocab.pitv")
    }
    pub fn db(&self) -> PathBuf {
        self.dir.join("db.pitd")
    }
    pub fn report(&self) -> PathBuf {
        self.dir.join("report.csv")
    }
    pub fn curve(&self) -> PathBuf {
        self.dir.join("curve.csv")
    }
    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.txt")
    }
    pub fn correlations(&self) -> PathBuf {
        self.dir.join("correlations.csv")
    }
    pub fn bins(&self, tag: &str) -> PathBuf {
        self.dir.join(format!("bins_{tag}.csv"))
    }
    pub fn sidecar(&self, command: &str) -> PathBuf {
        self.dir.join(format!("{command}.resolved.cfg"))
    }
}

fn write_sidecar(config: &RunConfig, command: &str) -> Result<()> {
    let paths = OutPaths::new(config.out_dir());
    std::fs::create_dir_all(paths.dir()).map_err(|e| Error::io(paths.dir(), e))?;
    let path = paths.sidecar(command);
    std::fs::write(&path, config.render()).map_err(|e| Error::io(&path, e))
}

/// Generate the world, trips, sweeps, GPS fixes and metadata.
pub fn cmd_synth(config: &RunConfig) -> Result<()> {
    write_sidecar(config, "synth")?;
    let paths = OutPaths::new(config.out_dir());
    let world = generate_world(&config.world_spec())?;
    write_world(&paths.world(), &world)?;

    let trip_specs = plan_trips(config, &world)?;
    let gps_model = config.gps_model()?;
    let sweep_config = config.sweep_config();

    let mut poses = Vec::new();
    let mut gps_rows = Vec::new();
    let mut metadata_rows = Vec::new();
    if config.synth_clouds {
        std::fs::create_dir_all(paths.clouds_dir())
            .map_err(|e| Error::io(paths.clouds_dir(), e))?;
    }
    for trip in &trip_specs {
        let readings = simulate_trip_readings(&world, trip, &gps_model, config.seed)?;
        if config.synth_clouds {
            let sweep_seed = derive_seed(config.seed, "trip-sweeps", 0);
            readings
                .poses
                .par_iter()
                .zip(&readings.metadata)
                .map(|(pose, (_, tags))| {
                    let sweep =
                        simulate_sweep_labeled(&world, pose, tags, sweep_seed, &sweep_config)?;
                    write_point_cloud(&paths.cloud(pose.reading_id), &sweep.cloud)
                })
                .collect::<Result<Vec<_>>>()?;
        }
        gps_rows.extend(
            readings
                .poses
                .iter()
                .zip(&readings.gps)
                .map(|(p, g)| (p.reading_id, *g)),
        );
        metadata_rows.extend(readings.metadata.iter().copied());
        poses.extend(readings.poses);
    }

    write_pose_csv(&paths.poses(), &poses)?;
    write_gps_csv(&paths.gps(), &gps_rows)?;
    write_metadata_csv(&paths.metadata(), &metadata_rows)?;
    Ok(())
}

/// Trip plans: either every trip follows one shared circuit with a per-trip
/// lane offset (overlapping routes, the default), or each trip random-walks
/// its own route.
fn plan_trips(config: &RunConfig, world: &World) -> Result<Vec<TripSpec>> {
    let mut specs = Vec::with_capacity(config.trips);
    let shared_circuit = match config.trip_mode.as_str() {
        "circuit" => Some(lattice_circuit_path(
            world,
            config.trip_length_m,
            derive_seed(config.seed, "circuit-path", 0),
        )),
        "random" => None,
        other => {
            return Err(Error::Config(format!(
                "trip.mode must be circuit|random, got `{other}`"
            )))
        }
    };
    for t in 0..config.trips {
        let trip_id = t as u64 + 1;
        let mut rng = rng_for(config.seed, "trip-plan", trip_id);
        let path = match &shared_circuit {
            Some(circuit) => {
                let lateral = if config.trip_lane_jitter_m > 0.0 {
                    rng.random_range(-config.trip_lane_jitter_m..=config.trip_lane_jitter_m)
                } else {
                    0.0
                };
                offset_path(circuit, lateral)
            }
            None => lattice_circuit_path(
                world,
                config.trip_length_m,
                derive_seed(config.seed, "trip-path", trip_id),
            ),
        };
        let conditions = ConditionTags {
            sun_angle_deg: rng.random_range(2.0..60.0),
            precipitation_mm: rng.random_range(0.0..=config.tags_precipitation_max_mm),
            visibility_km: rng.random_range(2.0..15.0),
            uv_index: rng.random_range(0..=10),
            temperature_c: rng.random_range(-5.0..30.0),
            humidity_pct: rng.random_range(30.0..90.0),
            cloud_cover_pct: rng.random_range(0.0..100.0),
            wind_speed_mps: rng.random_range(0.0..12.0),
            image_occlusion_pct: rng.random_range(0.0..25.0),
            lidar_occlusion_pct: rng.random_range(0.0..=config.tags_occlusion_max_pct),
            construction_pct: rng.random_range(0.0..8.0),
        };
        specs.push(TripSpec {
            trip_id,
            path,
            spacing_m: config.trip_spacing_m,
            conditions,
        });
    }
    Ok(specs)
}

fn preprocess_cloud(config: &RunConfig, cloud: &PointCloud) -> Result<BEVGrid> {
    let spec = config.grid_spec()?;
    let cut = remove_ground(cloud, config.ground_z_cut);
    let reduced = if config.downsample_target > 0 {
        voxel_downsample(&cut, config.downsample_target)
    } else {
        cut
    };
    Ok(voxelize(&reduced, &spec))
}

fn feature_for_reading(config: &RunConfig, paths: &OutPaths, reading_id: u64) -> Result<Vec<f64>> {
    let cloud = read_point_cloud(&paths.cloud(reading_id))?;
    Ok(bev_feature_vector(&preprocess_cloud(config, &cloud)?))
}

enum Embedder {
    Learned(EmbeddingModel),
    BevStats,
    Vlad(Vocabulary),
}

impl Embedder {
    fn for_config(config: &RunConfig, paths: &OutPaths) -> Result<Embedder> {
        match config.method.as_str() {
            "learned" => Ok(Embedder::Learned(read_model(&paths.model())?)),
            "bev" => Ok(Embedder::BevStats),
            "vlad" => Ok(Embedder::Vlad(read_vocabulary(&paths.vocab())?)),
            "gps" => Err(Error::Config(
                "method `gps` does not use a descriptor database".into(),
            )),
            other => Err(Error::Config(format!(
                "method must be learned|bev|vlad|gps, got `{other}`"
            ))),
        }
    }

    fn embed(&self, grid: &BEVGrid) -> Result<Descriptor> {
        match self {
            Embedder::Learned(model) => embed_features(&bev_feature_vector(grid), model),
            Embedder::BevStats => Ok(Descriptor::normalized(&bev_feature_vector(grid))),
            Embedder::Vlad(vocab) => vlad_pool(&bev_local_features(grid), vocab),
        }
    }
}

/// The optional low-sun degradation hook: below 15 degrees of sun altitude
/// the descriptor is perturbed with noise scaled by `strength`, then
/// renormalized. Off when strength is zero.
fn apply_sun_degradation(
    descriptor: Descriptor,
    sun_angle_deg: f64,
    strength: f64,
    seed: u64,
    reading_id: u64,
) -> Descriptor {
    if strength <= 0.0 || sun_angle_deg >= 15.0 || !descriptor.is_valid() {
        return descriptor;
    }
    let sigma = strength * (15.0 - sun_angle_deg).max(0.0) / 15.0;
    let mut rng = rng_for(seed, "sun-degrade", reading_id);
    let noisy: Vec<f64> = descriptor
        .values_f64()
        .iter()
        .map(|v| {
            let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            v + sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    Descriptor::normalized(&noisy)
}

struct Dataset {
    poses: Vec<Pose>,
    gps: BTreeMap<u64, GpsFix>,
    metadata: BTreeMap<u64, ConditionTags>,
}

impl Dataset {
    fn load(paths: &OutPaths) -> Result<Dataset> {
        let poses = read_pose_csv(&paths.poses())?;
        let gps = read_gps_csv(&paths.gps())?.into_iter().collect();
        let metadata = read_metadata_csv(&paths.metadata())?.into_iter().collect();
        Ok(Dataset {
            poses,
            gps,
            metadata,
        })
    }

    fn split(&self, config: &RunConfig) -> Result<EvalSplit> {
        make_split(
            &self.poses,
            config.split_train_pct,
            config.split_val_pct,
            config.eval_queries,
            config.seed,
        )
    }

    fn poses_in_trips(&self, trips: &[u64]) -> Vec<Pose> {
        let mut poses: Vec<Pose> = self
            .poses
            .iter()
            .filter(|p| trips.contains(&p.trip_id))
            .copied()
            .collect();
        poses.sort_by_key(|p| p.reading_id);
        poses
    }

    fn sun_angle(&self, reading_id: u64) -> f64 {
        self.metadata
            .get(&reading_id)
            .map(|t| t.sun_angle_deg)
            .unwrap_or(90.0)
    }
}

/// Train the embedding head on the train split and write the model and log.
pub fn cmd_train(config: &RunConfig) -> Result<()> {
    write_sidecar(config, "train")?;
    let paths = OutPaths::new(config.out_dir());
    let dataset = Dataset::load(&paths)?;
    let split = dataset.split(config)?;

    let train_poses = dataset.poses_in_trips(&split.train_trips);
    let val_poses = dataset.poses_in_trips(&split.val_trips);
    let train_features = load_features(config, &paths, &train_poses)?;
    let val_features = load_features(config, &paths, &val_poses)?;

    let d_in = bev_feature_dim(config.grid_spec()?.channels);
    let model = EmbeddingModel::random(
        d_in,
        config.model_hidden,
        config.model_out_dim,
        derive_seed(config.seed, "model-init", 0),
    );
    let train_dataset = TrainDataset {
        train_poses,
        train_features,
        val_poses,
        val_features,
    };
    let (trained, log) = train(
        &model,
        &train_dataset,
        &config.mining_rules(),
        &config.train_config()?,
    )?;
    write_model(&paths.model(), &trained)?;
    write_train_log(&paths.train_log(), &log)?;
    Ok(())
}

fn load_features(
    config: &RunConfig,
    paths: &OutPaths,
    poses: &[Pose],
) -> Result<Vec<Vec<f64>>> {
    poses
        .par_iter()
        .map(|p| feature_for_reading(config, paths, p.reading_id))
        .collect()
}

/// Build the retrieval database from the train+validation trips.
pub fn cmd_build_db(config: &RunConfig) -> Result<()> {
    write_sidecar(config, "build-db")?;
    let paths = OutPaths::new(config.out_dir());
    let dataset = Dataset::load(&paths)?;
    let split = dataset.split(config)?;
    let db_poses = dataset.poses_in_trips(&split.database_trips());

    if config.method == "vlad" && !paths.vocab().exists() {
        fit_vocabulary(config, &paths, &db_poses)?;
    }
    let embedder = Embedder::for_config(config, &paths)?;

    let descriptors: Vec<Result<Descriptor>> = db_poses
        .par_iter()
        .map(|p| {
            let cloud = read_point_cloud(&paths.cloud(p.reading_id))?;
            let grid = preprocess_cloud(config, &cloud)?;
            let desc = embedder.embed(&grid)?;
            Ok(apply_sun_degradation(
                desc,
                dataset.sun_angle(p.reading_id),
                config.eval_sun_degradation,
                config.seed,
                p.reading_id,
            ))
        })
        .collect();

    let mut records = Vec::with_capacity(db_poses.len());
    let mut failures = 0usize;
    for (pose, desc) in db_poses.iter().zip(descriptors) {
        match desc {
            Ok(descriptor) => records.push(LocRecord {
                descriptor,
                pose: *pose,
                metadata_ref: Some(pose.reading_id),
            }),
            Err(_) => failures += 1,
        }
    }
    if failures > 0 {
        eprintln!("build-db: {failures} readings failed to embed and were skipped");
    }
    let db = Database::from_records(records, DEFAULT_GRID_CELL_M)?;
    save_database(&paths.db(), &db)
}

fn fit_vocabulary(config: &RunConfig, paths: &OutPaths, db_poses: &[Pose]) -> Result<()> {
    let mut ids: Vec<u64> = db_poses.iter().map(|p| p.reading_id).collect();
    let mut rng = rng_for(config.seed, "vlad-subset", 0);
    let take = config.vlad_train_subset.min(ids.len());
    for i in 0..take.min(ids.len().saturating_sub(1)) {
        let j = rng.random_range(i..ids.len());
        ids.swap(i, j);
    }
    ids.truncate(take);
    ids.sort_unstable();

    let per_reading: Vec<LocalFeatureSet> = ids
        .par_iter()
        .map(|&id| {
            let cloud = read_point_cloud(&paths.cloud(id))?;
            Ok(bev_local_features(&preprocess_cloud(config, &cloud)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut features = Vec::new();
    for set in per_reading {
        features.extend(set.features().iter().cloned());
    }
    let set = LocalFeatureSet::new(features, 64);
    let vocab = kmeans_fit(
        &set,
        config.vlad_k,
        derive_seed(config.seed, "vlad-kmeans", 0),
        config.vlad_kmeans_iters,
    )?;
    write_vocabulary(&paths.vocab(), &vocab)
}

/// Evaluate the configured method over the test-trip queries. Returns the
/// report it writes.
pub fn cmd_eval(config: &RunConfig) -> Result<crate::eval::EvalReport> {
    write_sidecar(config, "eval")?;
    let paths = OutPaths::new(config.out_dir());
    let dataset = Dataset::load(&paths)?;
    let split = dataset.split(config)?;
    let by_id: BTreeMap<u64, Pose> = dataset.poses.iter().map(|p| (p.reading_id, *p)).collect();

    let (db, method) = if config.method == "gps" {
        (
            Database::from_records(Vec::new(), DEFAULT_GRID_CELL_M)?,
            EvalMethod::GpsOnly,
        )
    } else {
        let db = crate::index::load_database(&paths.db())?;
        let method = match config.eval_mode.as_str() {
            "exhaustive" => EvalMethod::Exhaustive,
            "gps" => EvalMethod::GpsRestricted {
                tau_m: config.eval_tau_m,
            },
            other => {
                return Err(Error::Config(format!(
                    "eval.mode must be exhaustive|gps, got `{other}`"
                )))
            }
        };
        (db, method)
    };

    let embedder = if config.method == "gps" {
        None
    } else {
        Some(Embedder::for_config(config, &paths)?)
    };

    let queries: Vec<EvalQuery> = split
        .query_ids
        .par_iter()
        .map(|&id| {
            let pose = *by_id.get(&id).ok_or(Error::UnknownReadingId(id))?;
            let gps = *dataset.gps.get(&id).ok_or(Error::UnknownReadingId(id))?;
            let descriptor = match &embedder {
                None => None,
                Some(e) => {
                    let cloud = read_point_cloud(&paths.cloud(id))?;
                    let desc = e.embed(&preprocess_cloud(config, &cloud)?)?;
                    Some(apply_sun_degradation(
                        desc,
                        dataset.sun_angle(id),
                        config.eval_sun_degradation,
                        config.seed,
                        id,
                    ))
                }
            };
            Ok(EvalQuery {
                reading_id: id,
                true_pose: pose,
                gps,
                descriptor,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let eval_config = EvalConfig {
        method,
        thresholds_m: config.eval_thresholds()?,
        correct_radius_m: config.eval_correct_radius_m,
    };
    let report = run_benchmark(&db, &queries, &eval_config)?;
    write_report_csv(&paths.report(), &report)?;
    write_curve_csv(&paths.curve(), &report.curve)?;
    write_summary(&paths.summary(), &report)?;
    Ok(report)
}

/// Embed a single cloud file and print its top-k hits.
pub fn cmd_query(config: &RunConfig, cloud_path: &Path) -> Result<Vec<RetrievalHit>> {
    write_sidecar(config, "query")?;
    let paths = OutPaths::new(config.out_dir());
    let db = crate::index::load_database(&paths.db())?;
    let embedder = Embedder::for_config(config, &paths)?;
    let cloud = read_point_cloud(cloud_path)?;
    let descriptor = embedder.embed(&preprocess_cloud(config, &cloud)?)?;
    if config.query_use_gps {
        let gps = GpsFix {
            x: config.query_gps_x,
            y: config.query_gps_y,
        };
        db.query_gps(&descriptor, &gps, config.eval_tau_m, config.query_k)
    } else {
        db.query_knn(&descriptor, config.query_k)
    }
}

/// Join reports with metadata, filter by GPS error and write correlations
/// and binned summaries.
pub fn cmd_analyze(config: &RunConfig) -> Result<()> {
    write_sidecar(config, "analyze")?;
    let paths = OutPaths::new(config.out_dir());
    let mut specs = config.analysis_report_specs()?;
    if specs.is_empty() {
        specs.push((config.method.clone(), paths.report()));
    }
    let mut reports = Vec::with_capacity(specs.len());
    for (name, path) in &specs {
        reports.push((name.clone(), crate::eval::read_report_csv(path)?));
    }
    let metadata: BTreeMap<u64, ConditionTags> =
        read_metadata_csv(&paths.metadata())?.into_iter().collect();

    let (mut table, excluded) =
        AnalysisTable::join(&reports, &metadata, config.analysis_failure_threshold_m)?;
    if excluded > 0 {
        eprintln!("analyze: {excluded} queries lacked metadata and were excluded");
    }

    // The hypothetical best-of-all-methods picker becomes another column.
    if table.methods.len() >= 2 {
        let method_cols: Vec<String> =
            table.methods.iter().map(|m| format!("error_{m}")).collect();
        let fused = oracle_fusion_error(&table, &method_cols)?;
        for (row, err) in table.rows.iter_mut().zip(fused) {
            row.errors.push(err);
        }
        table.methods.push("oracle_fusion".into());
    }

    let (filtered, dropped) = gps_filter(&table, config.analysis_gps_filter_m);
    if dropped > 0 {
        eprintln!("analyze: {dropped} rows dropped by the {}m GPS filter", {
            config.analysis_gps_filter_m
        });
    }

    let mut columns: Vec<String> = filtered
        .methods
        .iter()
        .map(|m| format!("failure_{m}"))
        .collect();
    columns.push("gps_error_m".into());
    columns.extend(TAG_COLUMNS.iter().map(|s| s.to_string()));
    let matrix = pearson_matrix(&filtered, &columns)?;
    write_correlations_csv(&paths.correlations(), &matrix)?;

    let first_method_error = format!("error_{}", filtered.methods[0]);
    for (tag, edges) in config.analysis_bin_specs()? {
        let mean_rows = binned_summary(
            &filtered,
            &tag,
            &edges,
            &first_method_error,
            BinStatistic::Mean,
        )?;
        let rate_rows = binned_summary(
            &filtered,
            &tag,
            &edges,
            &first_method_error,
            BinStatistic::FailureRate {
                threshold_m: config.analysis_failure_threshold_m,
            },
        )?;
        write_merged_bins(&paths.bins(&tag), &mean_rows, &rate_rows)?;
    }
    Ok(())
}

fn write_merged_bins(
    path: &Path,
    mean_rows: &[crate::analysis::BinRow],
    rate_rows: &[crate::analysis::BinRow],
) -> Result<()> {
    use std::io::Write;
    let mut out = Vec::new();
    writeln!(out, "bin_lo,bin_hi,mean_error_m,failure_rate,count").expect("in-memory write");
    for (m, r) in mean_rows.iter().zip(rate_rows) {
        let stat = |s: Option<f64>| s.map(|v| format!("{v}")).unwrap_or_else(|| "NA".into());
        writeln!(
            out,
            "{},{},{},{},{}",
            m.lo,
            m.hi,
            stat(m.statistic),
            stat(r.statistic),
            m.count
        )
        .expect("in-memory write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
