use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Feature rows with integer class labels.
///
/// Empty datasets are representable: an empty auxiliary split or a client
/// starved by the Dirichlet partition are legitimate states.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Tensor<f32>,
    labels: Vec<usize>,
    class_count: usize,
    class_counts: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(features: Tensor<f32>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::invalid("class_count must be positive"));
        }
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                context: "labeled dataset",
                expected: vec![labels.len(), features.cols()],
                actual: features.shape().to_vec(),
            });
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("dataset features"));
        }
        let mut class_counts = vec![0; class_count];
        for &y in &labels {
            if y >= class_count {
                return Err(Error::LabelOutOfRange { label: y, class_count });
            }
            class_counts[y] += 1;
        }
        Ok(Self {
            features,
            labels,
            class_count,
            class_counts,
        })
    }

    pub fn empty(feature_dim: usize, class_count: usize) -> Self {
        Self {
            features: Tensor::zeros(vec![0, feature_dim]),
            labels: Vec::new(),
            class_count,
            class_counts: vec![0; class_count],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor<f32> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    /// Every class has the same (positive) count.
    pub fn is_balanced(&self) -> bool {
        let first = self.class_counts[0];
        first > 0 && self.class_counts.iter().all(|&c| c == first)
    }

    /// Indices of class `c`'s samples, in dataset order.
    pub fn indices_of_class(&self, c: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == c)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let labels: Vec<usize> = idx.iter().map(|&i| self.labels[i]).collect();
        let mut class_counts = vec![0; self.class_count];
        for &y in &labels {
            class_counts[y] += 1;
        }
        Self {
            features: self.features.select_rows(idx),
            labels,
            class_count: self.class_count,
            class_counts,
        }
    }

    /// Features of `idx` converted to `T`, with their labels.
    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let x = self.features.select_rows(idx).cast();
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// The whole dataset as one batch.
    pub fn full_batch<T: Scalar>(&self) -> (Tensor<T>, Vec<usize>) {
        (self.features.cast(), self.labels.clone())
    }
}

/// Feature rows without labels.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledDataset {
    features: Tensor<f32>,
}

impl UnlabeledDataset {
    pub fn new(features: Tensor<f32>) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                context: "unlabeled dataset",
                expected: vec![features.rows(), features.cols()],
                actual: features.shape().to_vec(),
            });
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("dataset features"));
        }
        Ok(Self { features })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor<f32> {
        &self.features
    }

    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> Tensor<T> {
        self.features.select_rows(idx).cast()
    }
}

/// Drops labels, keeping feature rows in order.
pub fn make_unlabeled(ds: &LabeledDataset) -> UnlabeledDataset {
    UnlabeledDataset {
        features: ds.features.clone(),
    }
}
