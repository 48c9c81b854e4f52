use crate::error::{Error, Result};
use crate::nn::{MlpModel, ParamSet};
use crate::scalar::Scalar;

fn layer_shapes<T: Scalar>(m: &MlpModel<T>) -> Vec<Vec<usize>> {
    m.layers()
        .flat_map(|l| [l.weights().shape().to_vec(), l.bias().shape().to_vec()])
        .collect()
}

/// Size-weighted parameter mean `Σ_k (n_k / Σ_j n_j) · w_k`.
///
/// Accumulates `Σ n_k·w_k` in `f64` and divides once; for `f32` models every
/// partial sum is then exact when all inputs are equal, so averaging copies
/// of one model returns it bit-for-bit.
pub fn fedavg_aggregate<T: Scalar>(models: &[&MlpModel<T>], sizes: &[usize]) -> Result<MlpModel<T>> {
    let first = *models.first().ok_or_else(|| Error::invalid("fedavg needs at least one model"))?;
    if sizes.len() != models.len() {
        return Err(Error::ShapeMismatch {
            context: "fedavg sizes",
            expected: vec![models.len()],
            actual: vec![sizes.len()],
        });
    }
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::invalid("fedavg sizes are all zero"));
    }
    let shapes = layer_shapes(first);
    for m in &models[1..] {
        let s = layer_shapes(m);
        if s != shapes {
            return Err(Error::ShapeMismatch {
                context: "fedavg model congruence",
                expected: shapes.iter().flatten().copied().collect(),
                actual: s.iter().flatten().copied().collect(),
            });
        }
    }

    let mut acc: Vec<Vec<f64>> = first.param_slices().iter().map(|s| vec![0.0; s.len()]).collect();
    for (m, &n) in models.iter().zip(sizes) {
        if n == 0 {
            continue;
        }
        let w = n as f64;
        for (a, p) in acc.iter_mut().zip(m.param_slices()) {
            for (av, &pv) in a.iter_mut().zip(p) {
                *av += w * pv.to_f64_lossless();
            }
        }
    }
    let mut out = first.clone();
    let total = total as f64;
    for (dst, a) in out.param_slices_mut().into_iter().zip(&acc) {
        for (d, &v) in dst.iter_mut().zip(a) {
            *d = T::lit(v / total);
        }
    }
    Ok(out)
}

/// Normalized aggregation weights `n_k / Σ n_j`.
pub fn aggregation_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::invalid("fedavg sizes are all zero"));
    }
    Ok(sizes.iter().map(|&n| n as f64 / total as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, DenseLayer};
    use crate::tensor::Tensor;

    fn scalar_model(v: f64) -> MlpModel<f64> {
        let l = DenseLayer::new(Tensor::matrix(1, 1, vec![v]).unwrap(), Tensor::vector(vec![v]), Activation::Identity).unwrap();
        MlpModel::new(vec![l], DenseLayer::zeros(1, 1, Activation::Identity)).unwrap()
    }

    fn first_weight(m: &MlpModel<f64>) -> f64 {
        m.param_slices()[0][0]
    }

    #[test]
    fn plain_and_weighted_means() {
        let (a, b) = (scalar_model(2.0), scalar_model(6.0));
        assert_eq!(first_weight(&fedavg_aggregate(&[&a, &b], &[5, 5]).unwrap()), 4.0);
        assert_eq!(first_weight(&fedavg_aggregate(&[&a, &b], &[1, 3]).unwrap()), 5.0);
    }

    #[test]
    fn zero_sized_participant_has_no_weight() {
        let (a, b) = (scalar_model(2.0), scalar_model(6.0));
        assert_eq!(first_weight(&fedavg_aggregate(&[&a, &b], &[0, 3]).unwrap()), 6.0);
    }

    #[test]
    fn errors() {
        let a = scalar_model(1.0);
        assert!(fedavg_aggregate(&[&a, &a], &[0, 0]).is_err());
        assert!(fedavg_aggregate::<f64>(&[], &[]).is_err());
        let wide = MlpModel::new(
            vec![DenseLayer::zeros(1, 2, Activation::Relu)],
            DenseLayer::zeros(2, 1, Activation::Identity),
        )
        .unwrap();
        assert!(fedavg_aggregate(&[&a, &wide], &[1, 1]).is_err());
    }

    #[test]
    fn weights_sum_to_one() {
        let w = aggregation_weights(&[3, 7, 11, 0, 5]).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
