//! Mini-batch training loop shared by the pipelines and the sweep.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::optim::{lr_at_epoch, OptimizerConfig, OptimizerState};
use crate::seeds::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
}

/// Trains over `epochs` (absolute epoch indices into the LR schedule),
/// returning the mean training loss of each epoch.
pub fn train_epochs(
    model: &mut Model,
    state: &mut OptimizerState,
    data: &Dataset,
    settings: &TrainSettings,
    epochs: Range<usize>,
    shuffle_seed: u64,
) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(epochs.len());
    for epoch in epochs {
        state.lr = lr_at_epoch(&settings.optimizer.schedule, epoch)?;
        let mut total = 0.0;
        let mut seen = 0usize;
        for batch in batches(data, settings.batch_size, derive_seed(shuffle_seed, epoch as u64))? {
            let (loss, grads) = model.loss_and_grads(&batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            state.step(model, &grads)?;
            total += loss * batch.len() as f64;
            seen += batch.len();
        }
        log::debug!("epoch={epoch} loss={:.6}", total / seen.max(1) as f64);
        losses.push(total / seen.max(1) as f64);
    }
    Ok(losses)
}

/// Trains with a fresh optimizer state.
pub fn train_fresh(
    model: &mut Model,
    data: &Dataset,
    settings: &TrainSettings,
    epochs: Range<usize>,
    shuffle_seed: u64,
) -> Result<Vec<f64>> {
    let mut state = OptimizerState::from_config(&settings.optimizer, model);
    train_epochs(model, &mut state, data, settings, epochs, shuffle_seed)
}
