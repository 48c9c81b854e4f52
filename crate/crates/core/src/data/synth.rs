//! Gaussian-cluster stand-in for an image classification corpus.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

const MEANS_STREAM: u64 = 0x6d65616e;
const SAMPLES_STREAM: u64 = 0x73616d70;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub per_class: usize,
    pub feature_dim: usize,
    /// Per-coordinate standard deviation around each class mean. Means are
    /// drawn from a standard normal.
    pub cluster_spread: f64,
    pub seed: u64,
}

/// One mean per class; samples are `mean + spread · N(0, I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianClusters {
    means: Tensor<f32>,
}

impl GaussianClusters {
    pub fn draw(class_count: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        if class_count == 0 || feature_dim == 0 {
            return Err(Error::invalid("class_count and feature_dim must be positive"));
        }
        let mut rng = rng_for(seed, &[MEANS_STREAM]);
        let data = (0..class_count * feature_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
            .collect();
        Ok(Self {
            means: Tensor::matrix(class_count, feature_dim, data)?,
        })
    }

    pub fn means(&self) -> &Tensor<f32> {
        &self.means
    }

    pub fn class_count(&self) -> usize {
        self.means.rows()
    }

    /// Balanced sample, class-major order.
    pub fn sample(&self, per_class: usize, spread: f64, seed: u64) -> Result<LabeledDataset> {
        if !(spread >= 0.0) || !spread.is_finite() {
            return Err(Error::invalid(format!("cluster_spread must be finite and >= 0, got {spread}")));
        }
        let (c, dim) = (self.means.rows(), self.means.cols());
        let mut rng = rng_for(seed, &[SAMPLES_STREAM]);
        let mut data = Vec::with_capacity(c * per_class * dim);
        let mut labels = Vec::with_capacity(c * per_class);
        for class in 0..c {
            let mean = self.means.row(class);
            for _ in 0..per_class {
                data.extend(
                    mean.iter()
                        .map(|&m| (m as f64 + spread * rng.sample::<f64, _>(StandardNormal)) as f32),
                );
                labels.push(class);
            }
        }
        LabeledDataset::new(Tensor::matrix(c * per_class, dim, data)?, labels, c)
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    if spec.per_class == 0 {
        return Err(Error::invalid("per_class must be positive"));
    }
    GaussianClusters::draw(spec.class_count, spec.feature_dim, spec.seed)?.sample(
        spec.per_class,
        spec.cluster_spread,
        spec.seed,
    )
}
