//! The training loop: epoch-wise shuffled mini-batches with checkpointing.

use ndarray::{Array3, Axis};
use rand::seq::SliceRandom;

use super::network::{loss_and_gradients, TrainedNetwork};
use super::optim::{Optimizer, OptimizerSpec};
use super::Mode;
use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from_seed};

/// Train `net` up to `epochs` completed epochs, returning a deep-copied
/// checkpoint at every epoch listed in `checkpoint_epochs` (0 means the
/// starting state). `on_checkpoint` is invoked as each checkpoint is taken,
/// so callers can persist progress before a potential abort.
///
/// Batch order and dropout masks for epoch `e` derive from `(seed, e)` alone,
/// so training continued from a checkpoint reproduces an uninterrupted run
/// bit for bit.
pub fn train(
    net: &TrainedNetwork,
    data: &ImageDataset,
    optimizer: &OptimizerSpec,
    epochs: usize,
    checkpoint_epochs: &[usize],
    seed: u64,
    mut on_checkpoint: impl FnMut(&TrainedNetwork) -> Result<()>,
) -> Result<Vec<TrainedNetwork>> {
    optimizer.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training dataset".into()));
    }
    if checkpoint_epochs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(
            "checkpoint epochs must be strictly increasing".into(),
        ));
    }
    if let Some(&last) = checkpoint_epochs.last() {
        if last > epochs {
            return Err(Error::Config(format!(
                "checkpoint epoch {last} beyond final epoch {epochs}"
            )));
        }
    }

    let mut current = net.clone();
    current.train_seed = Some(seed);
    let mut checkpoints = Vec::with_capacity(checkpoint_epochs.len());
    let mut grid = checkpoint_epochs.iter().copied().peekable();
    if grid.peek() == Some(&current.epoch) {
        grid.next();
        let cp = current.clone();
        on_checkpoint(&cp)?;
        checkpoints.push(cp);
    }

    let n = data.len();
    let mut opt = Optimizer::new(*optimizer);
    let mut order: Vec<usize> = (0..n).collect();
    let (h, w) = data.image_dims();
    let mut batch_images = Array3::<f64>::zeros((optimizer.batch_size, h, w));
    let mut batch_labels = Vec::with_capacity(optimizer.batch_size);

    for epoch in (current.epoch + 1)..=epochs {
        // The order derives from (seed, epoch) alone: reset to identity
        // before shuffling so continuation from a checkpoint replays the
        // uninterrupted sequence exactly.
        for (i, slot) in order.iter_mut().enumerate() {
            *slot = i;
        }
        let mut order_rng = rng_from_seed(derive_seed(seed, "batch-order", epoch as u64));
        order.shuffle(&mut order_rng);
        let mut dropout_rng = rng_from_seed(derive_seed(seed, "dropout", epoch as u64));

        for batch in order.chunks(optimizer.batch_size) {
            batch_labels.clear();
            for (row, &src) in batch.iter().enumerate() {
                batch_images
                    .index_axis_mut(Axis(0), row)
                    .assign(&data.images.index_axis(Axis(0), src));
                batch_labels.push(data.labels[src]);
            }
            let view = if batch.len() == optimizer.batch_size {
                batch_images.view()
            } else {
                batch_images.slice(ndarray::s![..batch.len(), .., ..])
            };
            let (loss, grads) = loss_and_gradients(
                &current,
                &view.to_owned(),
                &batch_labels,
                &mut Mode::Train(&mut dropout_rng),
            )
            .map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { epoch },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            opt.step(&mut current.params, &grads);
        }
        current.epoch = epoch;

        if grid.peek() == Some(&epoch) {
            grid.next();
            let cp = current.clone();
            on_checkpoint(&cp)?;
            checkpoints.push(cp);
        }
    }
    Ok(checkpoints)
}

/// Fraction of samples whose head prediction matches the label.
pub fn training_accuracy(net: &TrainedNetwork, data: &ImageDataset) -> Result<f64> {
    let predicted = super::network::predict_classes(net, &data.images)?;
    crate::forest::accuracy(&predicted, &data.labels)
}
