//! Non-IID client partition with a per-class Dirichlet prior.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use crate::data::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub client_count: usize,
    /// Dirichlet concentration; smaller is more skewed.
    pub alpha: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.client_count == 0 {
            return Err(Error::invalid("client_count must be >= 1"));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Partition {
    pub clients: Vec<LabeledDataset>,
    /// Ids of clients that received no samples.
    pub empty_clients: Vec<usize>,
}

/// Draws one `Dirichlet(α·1_K)` vector via normalized Gamma variates.
pub fn sample_dirichlet<R: Rng>(rng: &mut R, alpha: f64, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated");
    let draws: Vec<f64> = (0..k).map(|_| rng.sample(gamma)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.into_iter().map(|g| g / total).collect()
    } else {
        // Every variate underflowed (tiny α): all mass on one client.
        let mut p = vec![0.0; k];
        p[rng.random_range(0..k)] = 1.0;
        p
    }
}

/// Integer counts summing exactly to `total`, proportional to `shares`;
/// leftover units go to the largest fractional parts (lower index on ties).
pub fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = shares.iter().map(|&p| p * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

pub fn dirichlet_partition(ds: &LabeledDataset, spec: &PartitionSpec) -> Result<Partition> {
    spec.validate()?;
    let k = spec.client_count;
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); k];
    for c in 0..ds.class_count() {
        let mut rng = rng_for(spec.seed, &[stream::PARTITION, c as u64]);
        let shares = sample_dirichlet(&mut rng, spec.alpha, k);
        let mut idx = ds.indices_of_class(c);
        idx.shuffle(&mut rng);
        let counts = largest_remainder(&shares, idx.len());
        let mut start = 0;
        for (client, &n) in counts.iter().enumerate() {
            assigned[client].extend_from_slice(&idx[start..start + n]);
            start += n;
        }
    }
    let mut empty_clients = Vec::new();
    let clients = assigned
        .into_iter()
        .enumerate()
        .map(|(client, mut idx)| {
            if idx.is_empty() {
                empty_clients.push(client);
            }
            idx.sort_unstable();
            ds.select(&idx)
        })
        .collect();
    Ok(Partition { clients, empty_clients })
}
