//! Long-tail shaping and the balanced auxiliary split.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongTailSpec {
    /// Ratio of the head class count to the tail class count; `>= 1`.
    pub imbalance_factor: f64,
    /// Count kept for class 0.
    pub head_count: usize,
    pub class_count: usize,
}

impl LongTailSpec {
    /// Exponential profile `round(n_max · IF^(−c/(C−1)))`, non-increasing in `c`.
    pub fn counts(&self) -> Result<Vec<usize>> {
        if !(self.imbalance_factor >= 1.0) || !self.imbalance_factor.is_finite() {
            return Err(Error::invalid(format!(
                "imbalance_factor must be finite and >= 1, got {}",
                self.imbalance_factor
            )));
        }
        if self.class_count == 0 || self.head_count == 0 {
            return Err(Error::invalid("class_count and head_count must be positive"));
        }
        if self.class_count == 1 {
            return Ok(vec![self.head_count]);
        }
        let denom = (self.class_count - 1) as f64;
        Ok((0..self.class_count)
            .map(|c| {
                let n = self.head_count as f64 * self.imbalance_factor.powf(-(c as f64) / denom);
                n.round() as usize
            })
            .collect())
    }
}

/// Uniform sample of `k` of `items` without replacement, returned in
/// ascending order of position.
fn sample_sorted<R: rand::Rng>(rng: &mut R, items: &[usize], k: usize) -> Vec<usize> {
    let mut picked: Vec<usize> = index::sample(rng, items.len(), k).into_iter().collect();
    picked.sort_unstable();
    picked.into_iter().map(|i| items[i]).collect()
}

/// Subsamples each class down to the long-tail profile of `spec`.
pub fn shape_long_tail(ds: &LabeledDataset, spec: &LongTailSpec, seed: u64) -> Result<LabeledDataset> {
    if spec.class_count != ds.class_count() {
        return Err(Error::invalid(format!(
            "long-tail spec has {} classes, dataset has {}",
            spec.class_count,
            ds.class_count()
        )));
    }
    let counts = spec.counts()?;
    for (c, (&need, &have)) in counts.iter().zip(ds.class_counts()).enumerate() {
        if have < need {
            return Err(Error::InsufficientSamples {
                class: c,
                needed: need,
                available: have,
            });
        }
    }
    let mut keep = Vec::with_capacity(counts.iter().sum());
    for (c, &need) in counts.iter().enumerate() {
        let mut rng = rng_for(seed, &[stream::LONG_TAIL, c as u64]);
        keep.extend(sample_sorted(&mut rng, &ds.indices_of_class(c), need));
    }
    keep.sort_unstable();
    Ok(ds.select(&keep))
}

/// Splits off exactly `per_class` samples of every class. Returns
/// `(aux, rest)`; the two are disjoint and together equal `ds`.
pub fn split_aux(ds: &LabeledDataset, per_class: usize, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if per_class == 0 {
        return Ok((LabeledDataset::empty(ds.feature_dim(), ds.class_count()), ds.clone()));
    }
    for (c, &have) in ds.class_counts().iter().enumerate() {
        if have <= per_class {
            return Err(Error::InsufficientSamples {
                class: c,
                needed: per_class + 1,
                available: have,
            });
        }
    }
    let mut in_aux = vec![false; ds.len()];
    for c in 0..ds.class_count() {
        let mut rng = rng_for(seed, &[stream::SPLIT_AUX, c as u64]);
        for i in sample_sorted(&mut rng, &ds.indices_of_class(c), per_class) {
            in_aux[i] = true;
        }
    }
    let (aux, rest): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| in_aux[i]);
    Ok((ds.select(&aux), ds.select(&rest)))
}
