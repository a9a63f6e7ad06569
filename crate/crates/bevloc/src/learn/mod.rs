//! Metric learning: geo-constrained triplet mining, the hinge losses with
//! exact subgradients, the hard-negative descriptor cache and the training
//! loop with Adam and plateau-driven learning-rate decay.

mod cache;
mod loss;
mod mining;
mod train;

pub use cache::{refresh_negative_cache, select_hard_negative, NegativeCache};
pub use loss::{
    lazy_quadruplet_loss, lazy_quadruplet_loss_raw, triplet_loss, triplet_loss_raw,
    QuadrupletGrads, TripletGrads,
};
pub use mining::{mine_triplets, MiningOutcome, MiningRules, PoseTable, Triplet};
pub use train::{
    read_train_log, train, write_train_log, BatchMode, TrainConfig, TrainDataset, TrainLog,
    TrainLogRow,
};
