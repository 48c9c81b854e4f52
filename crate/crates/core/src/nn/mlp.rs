use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Grads, Var};
use crate::nn::optim::ParamSet;
use crate::rng::rng_for;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// `y = act(x · W + b)` with `W` stored `[in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    weights: Tensor<T>,
    bias: Tensor<T>,
    activation: Activation,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>, activation: Activation) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                context: "dense layer weights",
                expected: vec![0, 0],
                actual: weights.shape().to_vec(),
            });
        }
        if bias.len() != weights.cols() {
            return Err(Error::ShapeMismatch {
                context: "dense layer bias",
                expected: vec![weights.cols()],
                actual: bias.shape().to_vec(),
            });
        }
        let bias = bias.reshape(vec![weights.cols()])?;
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn zeros(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Self {
            weights: Tensor::zeros(vec![input_dim, output_dim]),
            bias: Tensor::zeros(vec![output_dim]),
            activation,
        }
    }

    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`), zero bias.
    pub fn kaiming<R: Rng>(input_dim: usize, output_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = (6.0 / input_dim.max(1) as f64).sqrt();
        let data = (0..input_dim * output_dim)
            .map(|_| T::lit(rng.random_range(-bound..bound)))
            .collect();
        Self {
            weights: Tensor::new(vec![input_dim, output_dim], data).expect("sized above"),
            bias: Tensor::zeros(vec![output_dim]),
            activation,
        }
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor<T> {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                context: "dense layer input",
                expected: vec![x.rows(), self.input_dim()],
                actual: x.shape().to_vec(),
            });
        }
        let mut y = x.matmul(&self.weights)?;
        let m = self.output_dim();
        let relu = self.activation == Activation::Relu;
        for row in y.data_mut().chunks_mut(m.max(1)) {
            for (o, &b) in row.iter_mut().zip(self.bias.data()) {
                *o += b;
                if relu && !(*o > T::zero()) {
                    *o = T::zero();
                }
            }
        }
        Ok(y)
    }

    fn cast<U: Scalar>(&self) -> DenseLayer<U> {
        DenseLayer {
            weights: self.weights.cast(),
            bias: self.bias.cast(),
            activation: self.activation,
        }
    }
}

/// Layer widths of an [`MlpModel`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    /// Widths of the ReLU layers before the feature layer.
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub class_count: usize,
}

/// Feature extractor (stack of dense layers ending at width `d`) followed by
/// a linear classifier `d → C`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel<T> {
    feature_layers: Vec<DenseLayer<T>>,
    classifier: DenseLayer<T>,
}

impl<T: Scalar> MlpModel<T> {
    pub fn new(feature_layers: Vec<DenseLayer<T>>, classifier: DenseLayer<T>) -> Result<Self> {
        if feature_layers.is_empty() {
            return Err(Error::invalid("model needs at least one feature layer"));
        }
        if classifier.activation != Activation::Identity {
            return Err(Error::invalid("classifier layer must be linear"));
        }
        for pair in feature_layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::ShapeMismatch {
                    context: "layer chain",
                    expected: vec![pair[0].output_dim()],
                    actual: vec![pair[1].input_dim()],
                });
            }
        }
        let last = feature_layers.last().expect("non-empty").output_dim();
        if last != classifier.input_dim() {
            return Err(Error::ShapeMismatch {
                context: "classifier input",
                expected: vec![last],
                actual: vec![classifier.input_dim()],
            });
        }
        Ok(Self {
            feature_layers,
            classifier,
        })
    }

    /// Kaiming-initialized model; all feature layers use ReLU.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        if arch.input_dim == 0 || arch.feature_dim == 0 || arch.class_count == 0 || arch.hidden.contains(&0) {
            return Err(Error::invalid(format!("layer widths must be positive: {arch:?}")));
        }
        let mut rng = rng_for(seed, &[crate::rng::stream::MODEL_INIT]);
        let mut dims = vec![arch.input_dim];
        dims.extend(&arch.hidden);
        dims.push(arch.feature_dim);
        let feature_layers = dims
            .windows(2)
            .map(|w| DenseLayer::kaiming(w[0], w[1], Activation::Relu, &mut rng))
            .collect();
        let classifier = DenseLayer::kaiming(arch.feature_dim, arch.class_count, Activation::Identity, &mut rng);
        Self::new(feature_layers, classifier)
    }

    pub fn feature_layers(&self) -> &[DenseLayer<T>] {
        &self.feature_layers
    }

    pub fn classifier(&self) -> &DenseLayer<T> {
        &self.classifier
    }

    /// Feature layers followed by the classifier.
    pub fn layers(&self) -> impl Iterator<Item = &DenseLayer<T>> {
        self.feature_layers.iter().chain(std::iter::once(&self.classifier))
    }

    pub fn input_dim(&self) -> usize {
        self.feature_layers[0].input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.input_dim()
    }

    pub fn class_count(&self) -> usize {
        self.classifier.output_dim()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Returns `(features [N×d], logits [N×C])`.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_input(batch)?;
        let mut h = self.feature_layers[0].forward(batch)?;
        for layer in &self.feature_layers[1..] {
            h = layer.forward(&h)?;
        }
        let logits = self.classifier.forward(&h)?;
        Ok((h, logits))
    }

    pub fn logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(batch).map(|(_, l)| l)
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        if batch.shape().len() != 2 || batch.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                context: "model input",
                expected: vec![batch.rows(), self.input_dim()],
                actual: batch.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> MlpModel<U> {
        MlpModel {
            feature_layers: self.feature_layers.iter().map(DenseLayer::cast).collect(),
            classifier: self.classifier.cast(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.param_slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Registers every parameter on `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> ModelVars {
        let layers = self
            .layers()
            .map(|l| LayerVars {
                weights: g.param(l.weights.clone()),
                bias: g.param(l.bias.clone()),
                activation: l.activation,
            })
            .collect();
        ModelVars { layers }
    }

    /// Registers every parameter as a constant (frozen model on a graph).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> ModelVars {
        let layers = self
            .layers()
            .map(|l| LayerVars {
                weights: g.constant(l.weights.clone()),
                bias: g.constant(l.bias.clone()),
                activation: l.activation,
            })
            .collect();
        ModelVars { layers }
    }
}

impl<T: Scalar> ParamSet<T> for MlpModel<T> {
    fn param_slices(&self) -> Vec<&[T]> {
        self.layers().flat_map(|l| [l.weights.data(), l.bias.data()]).collect()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        self.feature_layers
            .iter_mut()
            .chain(std::iter::once(&mut self.classifier))
            .flat_map(|l| [l.weights.data_mut(), l.bias.data_mut()])
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerVars {
    weights: Var,
    bias: Var,
    activation: Activation,
}

/// Graph handles for a bound model, in layer order (classifier last).
#[derive(Debug, Clone)]
pub struct ModelVars {
    layers: Vec<LayerVars>,
}

impl ModelVars {
    /// Differentiable forward pass; returns `(features, logits)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, Var)> {
        let (last, feats) = self.layers.split_last().expect("model has layers");
        let mut h = x;
        for l in feats {
            h = Self::dense(g, l, h)?;
        }
        let logits = Self::dense(g, last, h)?;
        Ok((h, logits))
    }

    fn dense<T: Scalar>(g: &mut Graph<T>, l: &LayerVars, x: Var) -> Result<Var> {
        let z = g.matmul(x, l.weights)?;
        let z = g.add_row(z, l.bias)?;
        Ok(match l.activation {
            Activation::Identity => z,
            Activation::Relu => g.relu(z),
        })
    }

    pub fn gradients<T: Scalar>(&self, grads: &Grads<T>) -> Gradients<T> {
        Gradients {
            layers: self
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: grads.get_or_zeros(l.weights),
                    bias: grads.get_or_zeros(l.bias),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradient tree congruent with an [`MlpModel`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<LayerGrads<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(model: &MlpModel<T>) -> Self {
        Self {
            layers: model
                .layers()
                .map(|l| LayerGrads {
                    weights: Tensor::zeros(l.weights.shape().to_vec()),
                    bias: Tensor::zeros(l.bias.shape().to_vec()),
                })
                .collect(),
        }
    }

    pub fn l2_norm(&self) -> T {
        self.param_slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }
}

impl<T: Scalar> ParamSet<T> for Gradients<T> {
    fn param_slices(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| [l.weights.data(), l.bias.data()]).collect()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.data_mut(), l.bias.data_mut()])
            .collect()
    }
}

/// Evaluates `loss` on a fresh graph with `model`'s parameters bound as
/// trainable leaves and returns the loss value with exact reverse-mode
/// gradients for every parameter.
pub fn compute_gradients<T, F>(model: &MlpModel<T>, loss: F) -> Result<(T, Gradients<T>)>
where
    T: Scalar,
    F: FnOnce(&mut Graph<T>, &ModelVars) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let out = loss(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let value = g.value(out).item().expect("backward checked scalar");
    Ok((value, vars.gradients(&grads)))
}

/// Mean softmax cross-entropy of `model` on one labeled batch, with gradients.
pub fn cross_entropy_gradients<T: Scalar>(
    model: &MlpModel<T>,
    batch: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Gradients<T>)> {
    compute_gradients(model, |g, vars| {
        let x = g.constant(batch.clone());
        let (_, logits) = vars.forward(g, x)?;
        g.cross_entropy(logits, labels)
    })
}

/// Mean softmax cross-entropy without building a graph.
pub fn mean_cross_entropy<T: Scalar>(model: &MlpModel<T>, batch: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let logits = model.logits(batch)?;
    if labels.is_empty() {
        return Err(Error::EmptyDataset("mean_cross_entropy"));
    }
    let mut total = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        total += crate::nn::loss::softmax_cross_entropy(logits.row(i), y)?;
    }
    Ok(total / T::lit(labels.len() as f64))
}
