use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rollout::{collect_rollouts, TrainingWorld};
use super::update::PpoLearner;
use super::{ControllerBundle, PpoConfig, Scenario};
use crate::error::Result;

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub mean_cost: f64,
    pub value_loss: f64,
    pub surrogate_loss: f64,
    pub wall_time_s: f64,
}

/// Trains a fresh controller for `scenario`. Network initialization and
/// every rollout are derived from `seed`. `on_epoch` sees each log row as it
/// is produced.
pub fn train_controller(
    scenario: Scenario,
    config: &PpoConfig,
    world: &TrainingWorld,
    seed: u64,
    on_epoch: impl FnMut(&TrainLogRow),
) -> Result<(ControllerBundle, Vec<TrainLogRow>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bundle = ControllerBundle::init(scenario, &mut rng);
    train_from(bundle, config, world, rng.gen(), on_epoch)
}

/// Continues training an existing bundle. Stops after `epochs_max` epochs or
/// once the value loss falls below `value_loss_stop`.
pub fn train_from(
    bundle: ControllerBundle,
    config: &PpoConfig,
    world: &TrainingWorld,
    seed: u64,
    mut on_epoch: impl FnMut(&TrainLogRow),
) -> Result<(ControllerBundle, Vec<TrainLogRow>)> {
    config.validate()?;
    bundle.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut learner = PpoLearner::new(bundle, config.clone());
    let mut log = Vec::with_capacity(config.epochs_max);
    let start = Instant::now();
    for epoch in 0..config.epochs_max {
        let batch = collect_rollouts(&learner.bundle, config, world, rng.gen())?;
        let stats = learner.update(&batch, rng.gen())?;
        let row = TrainLogRow {
            epoch,
            mean_cost: batch.mean_cost(),
            value_loss: stats.value_loss,
            surrogate_loss: stats.surrogate_loss,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(&row);
        log.push(row);
        if stats.value_loss < config.value_loss_stop {
            break;
        }
    }
    Ok((learner.bundle, log))
}

/// Writes the log as CSV. Wall-clock times are replaced by zero unless
/// `wall_clock` is set, which keeps the file reproducible byte for byte.
pub fn write_training_log(path: impl AsRef<Path>, rows: &[TrainLogRow], wall_clock: bool) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        let mut r = row.clone();
        if !wall_clock {
            r.wall_time_s = 0.0;
        }
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
