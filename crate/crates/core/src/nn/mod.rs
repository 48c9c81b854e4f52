//! Dense networks with exact reverse-mode gradients, losses and optimizers.

pub mod graph;
pub mod loss;
pub mod mlp;
pub mod optim;

pub use graph::{softmax_rows, Graph, Grads, Var};
pub use loss::{kl_distill_loss, log_softmax_row, softmax_cross_entropy, softmax_row};
pub use mlp::{
    compute_gradients, cross_entropy_gradients, mean_cross_entropy, Activation, Architecture, DenseLayer,
    Gradients, LayerGrads, MlpModel, ModelVars,
};
pub use optim::{adam_step, sgd_step, AdamState, ParamSet};
