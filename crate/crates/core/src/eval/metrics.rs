use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Many,
    Medium,
    Few,
}

/// Training-count thresholds: `many` if count > `many_above`, `few` if
/// count < `few_below`, otherwise `medium`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupThresholds {
    pub many_above: usize,
    pub few_below: usize,
}

impl Default for GroupThresholds {
    fn default() -> Self {
        Self {
            many_above: 100,
            few_below: 20,
        }
    }
}

pub fn group_classes(train_class_counts: &[usize], th: &GroupThresholds) -> Vec<Group> {
    train_class_counts
        .iter()
        .map(|&n| {
            if n > th.many_above {
                Group::Many
            } else if n < th.few_below {
                Group::Few
            } else {
                Group::Medium
            }
        })
        .collect()
}

/// Top-1 accuracies on one test set. Group values are `None` when the group
/// has no classes (or no test samples).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub overall: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    /// `None` for classes with no test samples.
    pub per_class: Vec<Option<f64>>,
}

impl EvalMetrics {
    pub fn group(&self, g: Group) -> Option<f64> {
        match g {
            Group::Many => self.many,
            Group::Medium => self.medium,
            Group::Few => self.few,
        }
    }
}

pub fn evaluate_predictions(predictions: &[usize], test: &LabeledDataset, groups: &[Group]) -> Result<EvalMetrics> {
    if test.is_empty() {
        return Err(Error::EmptyDataset("test set"));
    }
    if predictions.len() != test.len() {
        return Err(Error::ShapeMismatch {
            context: "predictions vs test set",
            expected: vec![test.len()],
            actual: vec![predictions.len()],
        });
    }
    if groups.len() != test.class_count() {
        return Err(Error::ShapeMismatch {
            context: "class grouping",
            expected: vec![test.class_count()],
            actual: vec![groups.len()],
        });
    }
    let c = test.class_count();
    let mut correct = vec![0usize; c];
    for (&p, &y) in predictions.iter().zip(test.labels()) {
        if p == y {
            correct[y] += 1;
        }
    }
    let totals = test.class_counts();
    let per_class = (0..c)
        .map(|k| (totals[k] > 0).then(|| correct[k] as f64 / totals[k] as f64))
        .collect();
    let group_acc = |g: Group| {
        let (hit, n) = (0..c)
            .filter(|&k| groups[k] == g)
            .fold((0, 0), |(h, n), k| (h + correct[k], n + totals[k]));
        (n > 0).then(|| hit as f64 / n as f64)
    };
    Ok(EvalMetrics {
        overall: correct.iter().sum::<usize>() as f64 / test.len() as f64,
        many: group_acc(Group::Many),
        medium: group_acc(Group::Medium),
        few: group_acc(Group::Few),
        per_class,
    })
}

const EVAL_CHUNK: usize = 1024;

/// Accuracy of any logit producer over `test`, evaluated in chunks.
pub fn evaluate<F>(predict_logits: F, test: &LabeledDataset, groups: &[Group]) -> Result<EvalMetrics>
where
    F: Fn(&Tensor<f32>) -> Result<Tensor<f32>>,
{
    if test.is_empty() {
        return Err(Error::EmptyDataset("test set"));
    }
    let mut predictions = Vec::with_capacity(test.len());
    let all: Vec<usize> = (0..test.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let (x, _) = test.batch::<f32>(chunk);
        let logits = predict_logits(&x)?;
        if logits.rows() != chunk.len() || logits.cols() != test.class_count() {
            return Err(Error::ShapeMismatch {
                context: "predicted logits",
                expected: vec![chunk.len(), test.class_count()],
                actual: logits.shape().to_vec(),
            });
        }
        predictions.extend(logits.argmax_rows());
    }
    evaluate_predictions(&predictions, test, groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thresholds() {
        let th = GroupThresholds::default();
        assert_eq!(group_classes(&[500, 50, 5], &th), vec![Group::Many, Group::Medium, Group::Few]);
        assert_eq!(group_classes(&[100, 20, 19, 101], &th), vec![Group::Medium, Group::Medium, Group::Few, Group::Many]);
    }

    fn balanced(c: usize, per: usize) -> LabeledDataset {
        let labels: Vec<usize> = (0..c).flat_map(|k| std::iter::repeat_n(k, per)).collect();
        LabeledDataset::new(Tensor::zeros(vec![c * per, 1]), labels, c).unwrap()
    }

    #[test]
    fn empty_groups_are_absent() {
        let test = balanced(3, 4);
        let groups = group_classes(&[1000, 1000, 1000], &GroupThresholds::default());
        let m = evaluate_predictions(test.labels(), &test, &groups).unwrap();
        assert_eq!(m.overall, 1.0);
        assert_eq!(m.many, Some(1.0));
        assert_eq!((m.medium, m.few), (None, None));
    }

    #[test]
    fn constant_classifier() {
        let test = balanced(5, 3);
        let groups = vec![Group::Many, Group::Medium, Group::Medium, Group::Few, Group::Few];
        let m = evaluate(|x| {
            let mut l = Tensor::zeros(vec![x.rows(), 5]);
            for i in 0..x.rows() {
                l.data_mut()[i * 5] = 1.0;
            }
            Ok(l)
        }, &test, &groups)
        .unwrap();
        assert!((m.overall - 0.2).abs() < 1e-12);
        assert_eq!(m.many, Some(1.0));
        assert_eq!(m.few, Some(0.0));
    }

    #[test]
    fn empty_test_is_error() {
        let test = LabeledDataset::empty(1, 2);
        assert!(evaluate_predictions(&[], &test, &[Group::Many, Group::Few]).is_err());
    }
}
