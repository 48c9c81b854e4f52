//! Mini-batch SGD loops shared by local training and server fine-tuning.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{cross_entropy_gradients, sgd_step, MlpModel};
use crate::scalar::Scalar;

/// One shuffled pass over `0..n` cut into batches of at most `batch_size`.
pub fn epoch_batches<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// `steps` SGD updates with mean cross-entropy, walking consecutive shuffled
/// epochs of `ds`.
pub fn sgd_steps<T: Scalar, R: Rng>(
    model: &mut MlpModel<T>,
    ds: &LabeledDataset,
    steps: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut R,
) -> Result<()> {
    if steps == 0 {
        return Ok(());
    }
    if ds.is_empty() {
        return Err(Error::EmptyDataset("sgd training set"));
    }
    let lr = T::lit(lr);
    let mut done = 0;
    while done < steps {
        for batch in epoch_batches(ds.len(), batch_size, rng) {
            let (x, y) = ds.batch::<T>(&batch);
            let (_, grads) = cross_entropy_gradients(model, &x, &y)?;
            sgd_step(model, &grads, lr)?;
            if !model.is_finite() {
                return Err(Error::NonFinite("model parameters after SGD step"));
            }
            done += 1;
            if done == steps {
                break;
            }
        }
    }
    Ok(())
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size.max(1))
}
