// Scratch probe for training dynamics on the toy line world.
use bevloc::descriptor::EmbeddingModel;
use bevloc::learn::{train, BatchMode, MiningRules, TrainConfig, TrainDataset};
use bevloc::Pose;
use rand::Rng;

fn toy_dataset() -> TrainDataset {
    let mut train_poses = Vec::new();
    let mut train_features = Vec::new();
    let mut val_poses = Vec::new();
    let mut val_features = Vec::new();
    let mut rng = bevloc::seeds::rng_for(1, "toy-data", 0);
    for trip in 0..3u64 {
        let phase = trip as f64 * 0.3;
        let nuisance = match trip {
            0 => [30.0, 0.0],
            1 => [0.0, 30.0],
            _ => [28.0, 4.0],
        };
        for i in 0..60 {
            let x = i as f64 + phase;
            let pose = Pose::new(x, 0.0, 0.0, trip, i as f64, trip * 1000 + i);
            let noise: f64 = rng.random_range(-0.05..0.05);
            let features = vec![
                (x + noise) * 0.2,
                ((x * 0.37).sin() + 1.0) * 2.0,
                nuisance[0] + rng.random_range(-1.0..1.0),
                nuisance[1] + rng.random_range(-1.0..1.0),
            ];
            if trip < 2 {
                train_poses.push(pose);
                train_features.push(features);
            } else {
                val_poses.push(pose);
                val_features.push(features);
            }
        }
    }
    TrainDataset {
        train_poses,
        train_features,
        val_poses,
        val_features,
    }
}

fn main() {
    let dataset = toy_dataset();
    let model = EmbeddingModel::random(4, 16, 8, 7);
    let config = TrainConfig {
        max_iterations: 12000,
        cache_refresh_interval: 500,
        batch: BatchMode::Triplet { size: 16 },
        ..TrainConfig::default()
    };
    let (trained, log) = train(&model, &dataset, &MiningRules::default(), &config).unwrap();
    println!("iteration,loss,recall,lr");
    for r in &log.rows {
        println!(
            "{},{:.4},{:.2},{}",
            r.iteration, r.loss, r.val_recall_1m, r.learning_rate
        );
    }
    println!("skipped: {}", log.skipped_items);
    // Peek at learned first-layer weights: columns 2,3 are nuisance.
    let mut col_norms = [0.0f64; 4];
    for h in 0..trained.hidden {
        for i in 0..4 {
            col_norms[i] += (trained.w1[h * 4 + i] as f64).powi(2);
        }
    }
    println!("w1 column norms: {col_norms:?}");
}
