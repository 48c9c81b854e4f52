//! Distillation of the calibrated teacher into the aggregated global model:
//! `L = (1 − λ)·CE(student on aux) + λ·KL(teacher ‖ student on unlabeled)`.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{adam_step, compute_gradients, kl_distill_loss, softmax_cross_entropy, AdamState, MlpModel};
use crate::rng::{rng_for, stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    /// Weight of the KL term, in `[0, 1]`.
    pub lambda: f64,
    pub temperature: f64,
    /// Number of student optimizer steps.
    pub steps: usize,
    pub aux_batch_size: usize,
    pub ulb_batch_size: usize,
    /// Adam learning rate for the student.
    pub lr: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            temperature: 1.0,
            steps: 100,
            aux_batch_size: 64,
            ulb_batch_size: 64,
            lr: 1e-3,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.aux_batch_size == 0 || self.ulb_batch_size == 0 {
            return Err(Error::invalid("distillation batch sizes must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("distillation lr must be positive"));
        }
        Ok(())
    }

    fn uses_ce(&self) -> bool {
        self.lambda < 1.0
    }

    fn uses_kl(&self) -> bool {
        self.lambda > 0.0
    }
}

/// Evaluates the two-term loss on fixed logits. The term whose weight is zero
/// is skipped, so its batch may be empty.
pub fn distill_loss<T: Scalar>(
    student_aux_logits: &Tensor<T>,
    labels: &[usize],
    student_ulb_logits: &Tensor<T>,
    teacher_ulb_logits: &Tensor<T>,
    cfg: &DistillConfig,
) -> Result<T> {
    cfg.validate()?;
    let lambda = T::lit(cfg.lambda);
    let mut loss = T::zero();
    if cfg.uses_ce() {
        if labels.is_empty() || labels.len() != student_aux_logits.rows() {
            return Err(Error::invalid("CE term needs a non-empty aux batch with one label per row"));
        }
        let ce = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| softmax_cross_entropy(student_aux_logits.row(i), y))
            .sum::<Result<T>>()?
            / T::lit(labels.len() as f64);
        loss += (T::one() - lambda) * ce;
    }
    if cfg.uses_kl() {
        if student_ulb_logits.rows() == 0 || student_ulb_logits.shape() != teacher_ulb_logits.shape() {
            return Err(Error::invalid("KL term needs equal-shaped, non-empty teacher and student batches"));
        }
        let t = T::lit(cfg.temperature);
        let n = student_ulb_logits.rows();
        let kl = (0..n)
            .map(|i| kl_distill_loss(teacher_ulb_logits.row(i), student_ulb_logits.row(i), t))
            .sum::<Result<T>>()?
            / T::lit(n as f64);
        loss += lambda * kl;
    }
    Ok(loss)
}

/// One step's batches; `aux` may be empty when λ = 1, `ulb` when λ = 0.
pub struct DistillBatch<T> {
    pub aux_x: Tensor<T>,
    pub aux_y: Vec<usize>,
    pub ulb_x: Tensor<T>,
    pub teacher_logits: Tensor<T>,
}

/// Loss and student gradients for one batch pair.
pub fn distill_gradients<T: Scalar>(
    student: &MlpModel<T>,
    batch: &DistillBatch<T>,
    cfg: &DistillConfig,
) -> Result<(T, crate::nn::Gradients<T>)> {
    let lambda = T::lit(cfg.lambda);
    compute_gradients(student, |g, vars| {
        let mut terms = Vec::with_capacity(2);
        if cfg.uses_ce() {
            let x = g.constant(batch.aux_x.clone());
            let (_, logits) = vars.forward(g, x)?;
            let ce = g.cross_entropy(logits, &batch.aux_y)?;
            terms.push(g.scale(ce, T::one() - lambda));
        }
        if cfg.uses_kl() {
            let x = g.constant(batch.ulb_x.clone());
            let (_, logits) = vars.forward(g, x)?;
            let kl = g.kl_divergence(&batch.teacher_logits, logits, T::lit(cfg.temperature))?;
            terms.push(g.scale(kl, lambda));
        }
        match terms.as_slice() {
            [one] => Ok(*one),
            [a, b] => g.add(*a, *b),
            _ => unreachable!("lambda in [0, 1] selects at least one term"),
        }
    })
}

/// Runs `cfg.steps` Adam steps on a copy of `student`. Each step draws one aux
/// batch and one unlabeled batch independently and asks `teacher` for logits
/// on the unlabeled batch.
pub fn distill<T, F>(
    student: &MlpModel<T>,
    teacher: F,
    aux: &LabeledDataset,
    ulb: &UnlabeledDataset,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<MlpModel<T>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    cfg.validate()?;
    let mut model = student.clone();
    if cfg.steps == 0 {
        return Ok(model);
    }
    if cfg.uses_ce() && aux.is_empty() {
        return Err(Error::EmptyDataset("auxiliary set for distillation"));
    }
    if cfg.uses_kl() && ulb.is_empty() {
        return Err(Error::EmptyDataset("unlabeled set for distillation"));
    }
    let mut aux_rng = rng_for(seed, &[stream::DISTILL, 0]);
    let mut ulb_rng = rng_for(seed, &[stream::DISTILL, 1]);
    let mut adam = AdamState::new(&model);
    let lr = T::lit(cfg.lr);
    let c = model.class_count();
    for _ in 0..cfg.steps {
        let (aux_x, aux_y) = if cfg.uses_ce() {
            let mut idx = index::sample(&mut aux_rng, aux.len(), cfg.aux_batch_size.min(aux.len())).into_vec();
            idx.sort_unstable();
            aux.batch::<T>(&idx)
        } else {
            (Tensor::zeros(vec![0, model.input_dim()]), Vec::new())
        };
        let (ulb_x, teacher_logits) = if cfg.uses_kl() {
            let mut idx = index::sample(&mut ulb_rng, ulb.len(), cfg.ulb_batch_size.min(ulb.len())).into_vec();
            idx.sort_unstable();
            let x = ulb.batch::<T>(&idx);
            let t = teacher(&x)?;
            (x, t)
        } else {
            (Tensor::zeros(vec![0, model.input_dim()]), Tensor::zeros(vec![0, c]))
        };
        let batch = DistillBatch {
            aux_x,
            aux_y,
            ulb_x,
            teacher_logits,
        };
        let (_, grads) = distill_gradients(&model, &batch, cfg)?;
        adam_step(&mut adam, &mut model, &grads, lr)?;
        if !model.is_finite() {
            return Err(Error::NonFinite("student parameters after distillation step"));
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(rows: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::matrix(rows, data.len() / rows, data).unwrap()
    }

    fn cfg(lambda: f64) -> DistillConfig {
        DistillConfig {
            lambda,
            ..DistillConfig::default()
        }
    }

    #[test]
    fn endpoints_and_midpoint() {
        let aux = logits(2, vec![1.0, -0.5, 0.2, 0.3, 2.0, -1.0]);
        let y = [0, 1];
        let s = logits(2, vec![0.1, 0.2, 0.3, -1.0, 0.0, 1.0]);
        let t = logits(2, vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.0]);
        let ce = (softmax_cross_entropy(aux.row(0), 0).unwrap() + softmax_cross_entropy(aux.row(1), 1).unwrap()) / 2.0;
        let kl = (kl_distill_loss(t.row(0), s.row(0), 1.0).unwrap() + kl_distill_loss(t.row(1), s.row(1), 1.0).unwrap()) / 2.0;
        let l0 = distill_loss(&aux, &y, &s, &t, &cfg(0.0)).unwrap();
        let l1 = distill_loss(&aux, &y, &s, &t, &cfg(1.0)).unwrap();
        let lh = distill_loss(&aux, &y, &s, &t, &cfg(0.5)).unwrap();
        assert!((l0 - ce).abs() < 1e-15);
        assert!((l1 - kl).abs() < 1e-15);
        assert!((lh - 0.5 * (ce + kl)).abs() < 1e-15);
    }

    #[test]
    fn endpoint_batches_may_be_empty() {
        let aux = logits(1, vec![1.0, 0.0]);
        let empty = Tensor::<f64>::zeros(vec![0, 2]);
        assert!(distill_loss(&aux, &[0], &empty, &empty, &cfg(0.0)).is_ok());
        assert!(distill_loss(&empty, &[], &aux, &aux, &cfg(1.0)).is_ok());
        assert!(distill_loss(&empty, &[], &aux, &aux, &cfg(0.5)).is_err());
    }

    #[test]
    fn lambda_out_of_range() {
        let a = logits(1, vec![1.0, 0.0]);
        assert!(distill_loss(&a, &[0], &a, &a, &cfg(1.5)).is_err());
        assert!(distill_loss(&a, &[0], &a, &a, &cfg(-0.1)).is_err());
    }
}
