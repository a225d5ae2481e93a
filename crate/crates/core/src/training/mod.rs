//! Metric-learning training: triplet loss, batch-hard mining, AdamW and a
//! cyclic learning-rate schedule.

mod loss;
mod mining;
mod optim;
mod schedule;
mod trainer;

pub use loss::{euclidean, triplet_loss, triplet_loss_batch, TripletStats, DISTANCE_EPS};
pub use mining::{batch_hard_mine, Triplet};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use schedule::{cyclic_lr, CyclicLr};
pub use trainer::{evaluate_loss, train, Distance, EpochLog, PkSampler, ScheduleUnit, TrainConfig};
