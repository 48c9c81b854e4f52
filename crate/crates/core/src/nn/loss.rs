//! Plain (non-tape) loss evaluations. The tape versions in [`super::graph`]
//! share the same log-softmax helper so both paths agree.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Log-softmax with max subtraction.
pub fn log_softmax_row<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let lse = logits.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    logits.iter().map(|&x| x - lse).collect()
}

pub fn softmax_row<T: Scalar>(logits: &[T]) -> Vec<T> {
    log_softmax_row(logits).into_iter().map(|l| l.exp()).collect()
}

/// `-log softmax(logits)[label]`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], label: usize) -> Result<T> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            class_count: logits.len(),
        });
    }
    Ok(-log_softmax_row(logits)[label])
}

/// `KL(softmax(teacher/T) ‖ softmax(student/T))`.
pub fn kl_distill_loss<T: Scalar>(teacher: &[T], student: &[T], temperature: T) -> Result<T> {
    if !(temperature > T::zero()) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    if teacher.len() != student.len() {
        return Err(Error::ShapeMismatch {
            context: "kl_distill_loss",
            expected: vec![teacher.len()],
            actual: vec![student.len()],
        });
    }
    let t: Vec<T> = teacher.iter().map(|&x| x / temperature).collect();
    let s: Vec<T> = student.iter().map(|&x| x / temperature).collect();
    let (lt, ls) = (log_softmax_row(&t), log_softmax_row(&s));
    Ok(lt
        .iter()
        .zip(&ls)
        .map(|(&a, &b)| {
            let p = a.exp();
            if p > T::zero() {
                p * (a - b)
            } else {
                T::zero()
            }
        })
        .sum())
}
