// Scratch probe: criterion-5-scale benchmark — trained vs random-init
// embedding on the full synthetic pipeline, with stage timings.
use std::time::Instant;

use bevloc::config::RunConfig;
use bevloc::descriptor::{bev_feature_dim, write_model, EmbeddingModel};
use bevloc::eval::read_report_csv;
use bevloc::pipeline::{self, OutPaths};
use bevloc::seeds::derive_seed;

fn recall_within(errors: &[f64], radius: f64) -> f64 {
    100.0 * errors.iter().filter(|&&e| e <= radius).count() as f64 / errors.len() as f64
}

fn median(errors: &[f64]) -> f64 {
    let mut s = errors.to_vec();
    s.sort_by(f64::total_cmp);
    s[(s.len() - 1) / 2]
}

fn eval_and_read(config: &RunConfig, paths: &OutPaths) -> (f64, f64) {
    pipeline::cmd_build_db(config).unwrap();
    pipeline::cmd_eval(config).unwrap();
    let rows = read_report_csv(&paths.report()).unwrap();
    let errors: Vec<f64> = rows.iter().map(|r| r.1).collect();
    (recall_within(&errors, 1.0), median(&errors))
}

fn main() {
    let dir = std::env::temp_dir().join("bevloc_bench_probe");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();

    let mut config = RunConfig::default();
    config.out_dir = dir.to_string_lossy().into_owned();
    config.seed = 42;
    config.set("model.out_dim", "64").unwrap();
    config.set("eval.queries", "200").unwrap();
    config.set("eval.mode", "exhaustive").unwrap();
    config.set("tags.occlusion_max_pct", "22").unwrap();
    config.set("tags.precipitation_max_mm", "6").unwrap();
    let paths = OutPaths::new(config.out_dir());

    let t0 = Instant::now();
    pipeline::cmd_synth(&config).unwrap();
    println!("synth: {:.1}s", t0.elapsed().as_secs_f64());

    // Random-init baseline: write the untrained model and evaluate.
    let d_in = bev_feature_dim(config.grid_spec().unwrap().channels);
    let init = EmbeddingModel::random(
        d_in,
        config.model_hidden,
        config.model_out_dim,
        derive_seed(config.seed, "model-init", 0),
    );
    write_model(&paths.model(), &init).unwrap();
    let t1 = Instant::now();
    let (recall_untrained, median_untrained) = eval_and_read(&config, &paths);
    println!(
        "untrained: recall@1m {recall_untrained:.1}%, median {median_untrained:.3} m ({:.1}s)",
        t1.elapsed().as_secs_f64()
    );

    let t2 = Instant::now();
    pipeline::cmd_train(&config).unwrap();
    println!("train: {:.1}s", t2.elapsed().as_secs_f64());
    let log = std::fs::read_to_string(paths.train_log()).unwrap();
    print!("{log}");

    let t3 = Instant::now();
    let (recall_trained, median_trained) = eval_and_read(&config, &paths);
    println!(
        "trained: recall@1m {recall_trained:.1}%, median {median_trained:.3} m ({:.1}s)",
        t3.elapsed().as_secs_f64()
    );
    println!(
        "ratio: {:.2}x, medians {median_trained:.3} < {median_untrained:.3}: {}",
        recall_trained / recall_untrained.max(0.5),
        median_trained < median_untrained
    );
    println!("total: {:.1}s", t0.elapsed().as_secs_f64());
}
