//! Fixtures shared by the benchmarks.

use fvib_core::data::{split, synth_blobs, Splits};
use fvib_core::fvib::{train, BalancePolicy, TrainedFvib};
use fvib_core::{LrSchedule, Result, TrainConfig};

/// Three-class blobs in four dimensions, split 60/20/20.
pub fn blobs(per_class: usize) -> Result<Splits> {
    split(&synth_blobs(3, per_class, 4, 0.6, 0)?, [0.6, 0.2, 0.2], 0)
}

pub fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 50,
        learning_rate: 1e-2,
        lr_schedule: LrSchedule::Constant,
        seed: 0,
    }
}

/// A small FVIB model trained on [`blobs`].
pub fn trained(splits: &Splits) -> Result<TrainedFvib> {
    train(&splits.train, &[32, 32], &quick_config(20), BalancePolicy::Strict)
}
