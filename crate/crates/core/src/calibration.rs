//! Calibrated teacher built on the server from the round's local models.
//!
//! For an input `x` and selected clients `S`:
//!
//! ```text
//! e_k   = sigmoid(a_eᵀ φ_k(x) + b_e) / Σ_j sigmoid(a_eᵀ φ_j(x) + b_e)
//! φᵗ    = Σ_k e_k φ_k(x)
//! z_cl  = a_z ⊙ φᵗ + b_z
//! z_ft  = φ_ŵ(x)                       (ŵ: global fine-tuned on the aux set)
//! v     = (1/|S|) Σ_k f_k(x)
//! σ     = sigmoid(uᵀ v)
//! z'    = σ z_cl + (1 − σ) z_ft
//! ```
//!
//! `a_e, b_e, a_z, b_z, u` are trained with cross-entropy of `z'` on the
//! auxiliary set while every network stays frozen. The two toggles switch off
//! fine-tuning (`z' = z_cl`) or logit adjustment (`z' = z_ft`); with both off
//! the teacher is the plain average ensemble.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamState, Graph, MlpModel, ParamSet, Var};
use crate::rng::{rng_for, stream};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::Tensor;
use crate::train::sgd_steps;

/// Learnable calibration state.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationParams<T> {
    /// Client-weight projection, length `C`.
    pub a_e: Vec<T>,
    pub b_e: T,
    /// Class-wise scale, length `C`.
    pub a_z: Vec<T>,
    /// Class-wise shift, length `C`.
    pub b_z: Vec<T>,
    /// Gate weights over the feature ensemble, length `d`.
    pub u: Vec<T>,
}

impl<T: Scalar> CalibrationParams<T> {
    /// `a_e = 0, b_e = 0, a_z = 1, b_z = 0, u = 0`: uniform client weights,
    /// identity adjustment and a gate of 0.5.
    pub fn identity(class_count: usize, feature_dim: usize) -> Self {
        Self {
            a_e: vec![T::zero(); class_count],
            b_e: T::zero(),
            a_z: vec![T::one(); class_count],
            b_z: vec![T::zero(); class_count],
            u: vec![T::zero(); feature_dim],
        }
    }

    pub fn class_count(&self) -> usize {
        self.a_z.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.u.len()
    }

    pub fn validate(&self, class_count: usize, feature_dim: usize) -> Result<()> {
        let c = [self.a_e.len(), self.a_z.len(), self.b_z.len()];
        if c.iter().any(|&n| n != class_count) || self.u.len() != feature_dim {
            return Err(Error::ShapeMismatch {
                context: "calibration parameters (a_e, a_z, b_z, u)",
                expected: vec![class_count, class_count, class_count, feature_dim],
                actual: vec![c[0], c[1], c[2], self.u.len()],
            });
        }
        if !self.param_slices().iter().all(|s| s.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("calibration parameters"));
        }
        Ok(())
    }

    fn bind(&self, g: &mut Graph<T>) -> CalibVars {
        CalibVars {
            a_e: g.param(Tensor::vector(self.a_e.clone())),
            b_e: g.param(Tensor::scalar(self.b_e)),
            a_z: g.param(Tensor::vector(self.a_z.clone())),
            b_z: g.param(Tensor::vector(self.b_z.clone())),
            u: g.param(Tensor::vector(self.u.clone())),
        }
    }
}

impl<T: Scalar> ParamSet<T> for CalibrationParams<T> {
    fn param_slices(&self) -> Vec<&[T]> {
        vec![&self.a_e, std::slice::from_ref(&self.b_e), &self.a_z, &self.b_z, &self.u]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            &mut self.a_e,
            std::slice::from_mut(&mut self.b_e),
            &mut self.a_z,
            &mut self.b_z,
            &mut self.u,
        ]
    }
}

/// Which calibration components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Toggles {
    pub fine_tune: bool,
    pub logit_adjust: bool,
}

impl Toggles {
    pub const ALL: Toggles = Toggles {
        fine_tune: true,
        logit_adjust: true,
    };
    pub const NONE: Toggles = Toggles {
        fine_tune: false,
        logit_adjust: false,
    };
}

impl Default for Toggles {
    fn default() -> Self {
        Self::ALL
    }
}

fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch {
            context,
            expected: vec![expected],
            actual: vec![actual],
        });
    }
    Ok(())
}

/// Per-sample client weights from the clients' logits (`[|S|×C]`).
pub fn client_weights<T: Scalar>(client_logits: &Tensor<T>, a_e: &[T], b_e: T) -> Result<Vec<T>> {
    if client_logits.rows() == 0 {
        return Err(Error::invalid("client_weights needs at least one client"));
    }
    check_len("client_weights a_e", client_logits.cols(), a_e.len())?;
    let raw: Vec<T> = (0..client_logits.rows())
        .map(|k| {
            let s: T = client_logits.row(k).iter().zip(a_e).map(|(&l, &a)| l * a).sum();
            sigmoid(s + b_e)
        })
        .collect();
    let total: T = raw.iter().copied().sum();
    Ok(raw.into_iter().map(|r| r / total).collect())
}

/// `Σ_k e_k · φ_k`.
pub fn ensemble_logits<T: Scalar>(client_logits: &Tensor<T>, e: &[T]) -> Result<Vec<T>> {
    check_len("ensemble_logits weights", client_logits.rows(), e.len())?;
    let mut out = vec![T::zero(); client_logits.cols()];
    for (k, &w) in e.iter().enumerate() {
        for (o, &l) in out.iter_mut().zip(client_logits.row(k)) {
            *o += l * w;
        }
    }
    Ok(out)
}

/// Equal-weight ensemble `Σ_k (1/|S|) · φ_k`.
pub fn average_ensemble<T: Scalar>(client_logits: &Tensor<T>) -> Result<Vec<T>> {
    let s = client_logits.rows();
    if s == 0 {
        return Err(Error::invalid("average_ensemble needs at least one client"));
    }
    ensemble_logits(client_logits, &vec![T::one() / T::lit(s as f64); s])
}

/// `a_z ⊙ φᵗ + b_z`.
pub fn classwise_adjust<T: Scalar>(ensemble: &[T], a_z: &[T], b_z: &[T]) -> Result<Vec<T>> {
    check_len("classwise_adjust a_z", ensemble.len(), a_z.len())?;
    check_len("classwise_adjust b_z", ensemble.len(), b_z.len())?;
    Ok(ensemble
        .iter()
        .zip(a_z)
        .zip(b_z)
        .map(|((&x, &a), &b)| a * x + b)
        .collect())
}

/// Feature ensemble `v` (mean of client features `[|S|×d]`) and gate `σ = sigmoid(uᵀv)`.
pub fn gate<T: Scalar>(client_features: &Tensor<T>, u: &[T]) -> Result<(T, Vec<T>)> {
    let s = client_features.rows();
    if s == 0 {
        return Err(Error::invalid("gate needs at least one client"));
    }
    check_len("gate u", client_features.cols(), u.len())?;
    let v = mean_rows(client_features);
    let dot: T = v.iter().zip(u).map(|(&a, &b)| a * b).sum();
    Ok((sigmoid(dot), v))
}

fn mean_rows<T: Scalar>(m: &Tensor<T>) -> Vec<T> {
    let mut v = vec![T::zero(); m.cols()];
    for k in 0..m.rows() {
        for (o, &f) in v.iter_mut().zip(m.row(k)) {
            *o += f;
        }
    }
    let n = T::lit(m.rows() as f64);
    v.into_iter().map(|x| x / n).collect()
}

/// `σ · z_cl + (1 − σ) · z_ft`.
pub fn fuse<T: Scalar>(z_cl: &[T], z_ft: &[T], sigma: T) -> Result<Vec<T>> {
    check_len("fuse", z_cl.len(), z_ft.len())?;
    if !(sigma >= T::zero() && sigma <= T::one()) {
        return Err(Error::invalid(format!("gate value {sigma} outside [0, 1]")));
    }
    let rest = T::one() - sigma;
    Ok(z_cl.iter().zip(z_ft).map(|(&c, &f)| c * sigma + f * rest).collect())
}

/// Every intermediate signal of the teacher for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBundle<T> {
    /// `[|S|×C]`
    pub client_logits: Tensor<T>,
    /// `[|S|×d]`
    pub client_features: Tensor<T>,
    /// Ensemble weights `e` (uniform when logit adjustment is off).
    pub weights: Vec<T>,
    /// `φᵗ`
    pub ensemble: Vec<T>,
    /// `z_cl`; equals `φᵗ` when logit adjustment is off.
    pub z_cl: Vec<T>,
    /// `z_ft`; present only when fine-tuning is on.
    pub z_ft: Option<Vec<T>>,
    /// Feature ensemble `v`.
    pub v: Vec<T>,
    /// Gate value; present only when both components are on.
    pub sigma: Option<T>,
    /// Final logits `z'`.
    pub fused: Vec<T>,
}

/// The calibrated ensemble for one round.
#[derive(Debug, Clone, Copy)]
pub struct Teacher<'a, T> {
    pub local_models: &'a [MlpModel<T>],
    /// `ŵ`; required when fine-tuning is on.
    pub fine_tuned: Option<&'a MlpModel<T>>,
    pub params: &'a CalibrationParams<T>,
    pub toggles: Toggles,
}

struct ClientOutputs<T> {
    features: Vec<Tensor<T>>,
    logits: Vec<Tensor<T>>,
    z_ft: Option<Tensor<T>>,
}

impl<'a, T: Scalar> Teacher<'a, T> {
    fn validate(&self) -> Result<()> {
        let first = self
            .local_models
            .first()
            .ok_or_else(|| Error::invalid("teacher needs at least one local model"))?;
        self.params.validate(first.class_count(), first.feature_dim())?;
        for m in self.local_models.iter().chain(self.fine_tuned) {
            if m.class_count() != first.class_count() || m.input_dim() != first.input_dim() {
                return Err(Error::ShapeMismatch {
                    context: "teacher model dimensions (input, classes)",
                    expected: vec![first.input_dim(), first.class_count()],
                    actual: vec![m.input_dim(), m.class_count()],
                });
            }
        }
        if self.toggles.fine_tune && self.fine_tuned.is_none() {
            return Err(Error::invalid("fine-tuning is enabled but no fine-tuned model was given"));
        }
        Ok(())
    }

    fn client_outputs(&self, x: &Tensor<T>) -> Result<ClientOutputs<T>> {
        self.validate()?;
        let mut features = Vec::with_capacity(self.local_models.len());
        let mut logits = Vec::with_capacity(self.local_models.len());
        for m in self.local_models {
            let (f, l) = m.forward(x)?;
            features.push(f);
            logits.push(l);
        }
        let z_ft = match (self.toggles.fine_tune, self.fine_tuned) {
            (true, Some(m)) => Some(m.logits(x)?),
            _ => None,
        };
        Ok(ClientOutputs { features, logits, z_ft })
    }

    fn bundle(&self, out: &ClientOutputs<T>, i: usize) -> Result<LogitBundle<T>> {
        let rows = |ts: &[Tensor<T>]| {
            Tensor::from_rows(&ts.iter().map(|t| t.row(i).to_vec()).collect::<Vec<_>>())
        };
        let client_logits = rows(&out.logits)?;
        let client_features = rows(&out.features)?;
        let p = self.params;
        let (weights, ensemble, z_cl) = if self.toggles.logit_adjust {
            let e = client_weights(&client_logits, &p.a_e, p.b_e)?;
            let phi = ensemble_logits(&client_logits, &e)?;
            let z = classwise_adjust(&phi, &p.a_z, &p.b_z)?;
            (e, phi, z)
        } else {
            let s = client_logits.rows();
            let phi = average_ensemble(&client_logits)?;
            (vec![T::one() / T::lit(s as f64); s], phi.clone(), phi)
        };
        let (sigma_raw, v) = gate(&client_features, &p.u)?;
        let z_ft = out.z_ft.as_ref().map(|t| t.row(i).to_vec());
        let (sigma, fused) = match (&z_ft, self.toggles.logit_adjust) {
            (Some(ft), true) => (Some(sigma_raw), fuse(&z_cl, ft, sigma_raw)?),
            (Some(ft), false) => (None, ft.clone()),
            (None, _) => (None, z_cl.clone()),
        };
        Ok(LogitBundle {
            client_logits,
            client_features,
            weights,
            ensemble,
            z_cl,
            z_ft,
            v,
            sigma,
            fused,
        })
    }

    /// Full pipeline for every row of `x`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Vec<LogitBundle<T>>> {
        let out = self.client_outputs(x)?;
        (0..x.rows()).map(|i| self.bundle(&out, i)).collect()
    }

    /// Calibrated logits `z'` as an `[N×C]` matrix.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.client_outputs(x)?;
        let rows: Vec<Vec<T>> = (0..x.rows())
            .map(|i| self.bundle(&out, i).map(|b| b.fused))
            .collect::<Result<_>>()?;
        if rows.is_empty() {
            return Ok(Tensor::zeros(vec![0, self.params.class_count()]));
        }
        Tensor::from_rows(&rows)
    }
}

/// Free-standing form of [`Teacher::forward`].
pub fn teacher_forward<T: Scalar>(
    x: &Tensor<T>,
    local_models: &[MlpModel<T>],
    fine_tuned: Option<&MlpModel<T>>,
    params: &CalibrationParams<T>,
    toggles: Toggles,
) -> Result<Vec<LogitBundle<T>>> {
    Teacher {
        local_models,
        fine_tuned,
        params,
        toggles,
    }
    .forward(x)
}

/// Owned teacher state (everything except the local models).
#[derive(Debug, Clone)]
pub struct TeacherState<T> {
    pub fine_tuned: Option<MlpModel<T>>,
    pub params: CalibrationParams<T>,
    pub toggles: Toggles,
}

impl<T: Scalar> TeacherState<T> {
    pub fn teacher<'a>(&'a self, local_models: &'a [MlpModel<T>]) -> Teacher<'a, T> {
        Teacher {
            local_models,
            fine_tuned: self.fine_tuned.as_ref(),
            params: &self.params,
            toggles: self.toggles,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationTrainConfig {
    /// Number of optimizer steps on the calibration parameters.
    pub steps: usize,
    pub batch_size: usize,
    /// Adam learning rate for the calibration parameters.
    pub lr: f64,
    pub fine_tune_steps: usize,
    pub fine_tune_lr: f64,
    pub fine_tune_batch_size: usize,
    /// Carry calibration parameters over to the next round instead of
    /// re-initializing them.
    #[serde(default)]
    pub persist: bool,
    #[serde(skip)]
    pub toggles: Toggles,
}

impl Default for CalibrationTrainConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            batch_size: 64,
            lr: 1e-3,
            fine_tune_steps: 50,
            fine_tune_lr: 0.01,
            fine_tune_batch_size: 64,
            persist: false,
            toggles: Toggles::ALL,
        }
    }
}

impl CalibrationTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.fine_tune_batch_size == 0 {
            return Err(Error::invalid("calibration batch sizes must be positive"));
        }
        if !(self.lr > 0.0) || !(self.fine_tune_lr > 0.0) {
            return Err(Error::invalid("calibration learning rates must be positive"));
        }
        Ok(())
    }
}

fn check_aux(aux: &LabeledDataset) -> Result<()> {
    if aux.is_empty() {
        return Err(Error::EmptyDataset("auxiliary set"));
    }
    if !aux.is_balanced() {
        return Err(Error::invalid(format!(
            "auxiliary set must be balanced, class counts are {:?}",
            aux.class_counts()
        )));
    }
    Ok(())
}

/// `ŵ`: a copy of `global` trained for `steps` SGD steps on the auxiliary set.
/// Every layer is updated.
pub fn fine_tune_global<T: Scalar>(
    global: &MlpModel<T>,
    aux: &LabeledDataset,
    steps: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<MlpModel<T>> {
    check_aux(aux)?;
    let mut model = global.clone();
    let mut rng = rng_for(seed, &[stream::FINE_TUNE]);
    sgd_steps(&mut model, aux, steps, batch_size, lr, &mut rng)?;
    Ok(model)
}

/// Frozen per-sample signals over a labeled batch, precomputed once so the
/// calibration steps only touch the calibration parameters.
#[derive(Debug, Clone)]
pub struct CalibrationInputs<T> {
    /// One `[N×C]` matrix per client.
    pub client_logits: Vec<Tensor<T>>,
    /// Feature ensemble `v`, `[N×d]`.
    pub feature_mean: Tensor<T>,
    /// `z_ft`, `[N×C]`, when fine-tuning is on.
    pub z_ft: Option<Tensor<T>>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> CalibrationInputs<T> {
    pub fn compute(
        local_models: &[MlpModel<T>],
        fine_tuned: Option<&MlpModel<T>>,
        x: &Tensor<T>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if local_models.is_empty() {
            return Err(Error::invalid("calibration needs at least one local model"));
        }
        let mut client_logits = Vec::with_capacity(local_models.len());
        let mut feats = Vec::with_capacity(local_models.len());
        for m in local_models {
            let (f, l) = m.forward(x)?;
            feats.push(f);
            client_logits.push(l);
        }
        let n = x.rows();
        let d = feats[0].cols();
        let mut mean = Vec::with_capacity(n * d);
        for i in 0..n {
            let per_sample = Tensor::from_rows(&feats.iter().map(|f| f.row(i).to_vec()).collect::<Vec<_>>())?;
            mean.extend(mean_rows(&per_sample));
        }
        Ok(Self {
            client_logits,
            feature_mean: Tensor::matrix(n, d, mean)?,
            z_ft: fine_tuned.map(|m| m.logits(x)).transpose()?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            client_logits: self.client_logits.iter().map(|t| t.select_rows(idx)).collect(),
            feature_mean: self.feature_mean.select_rows(idx),
            z_ft: self.z_ft.as_ref().map(|t| t.select_rows(idx)),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct CalibVars {
    a_e: Var,
    b_e: Var,
    a_z: Var,
    b_z: Var,
    u: Var,
}

/// Builds `z'` for a batch of precomputed inputs on `g`.
fn calibrated_logits_graph<T: Scalar>(
    g: &mut Graph<T>,
    inputs: &CalibrationInputs<T>,
    vars: CalibVars,
    toggles: Toggles,
) -> Result<Var> {
    let s = inputs.client_logits.len();
    let z_cl = if toggles.logit_adjust {
        let mut logits = Vec::with_capacity(s);
        let mut raw = Vec::with_capacity(s);
        for l in &inputs.client_logits {
            let lv = g.constant(l.clone());
            let score = g.matvec(lv, vars.a_e)?;
            let score = g.add_scalar(score, vars.b_e)?;
            raw.push(g.sigmoid(score));
            logits.push(lv);
        }
        let stacked = g.stack_cols(&raw)?;
        let e = g.row_normalize(stacked)?;
        let mut phi: Option<Var> = None;
        for (k, &lv) in logits.iter().enumerate() {
            let ek = g.column(e, k)?;
            let term = g.mul_col(lv, ek)?;
            phi = Some(match phi {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        let phi = phi.expect("at least one client");
        let scaled = g.mul_row(phi, vars.a_z)?;
        g.add_row(scaled, vars.b_z)?
    } else {
        let w = T::one() / T::lit(s as f64);
        let n = inputs.len();
        let c = inputs.client_logits[0].cols();
        let mut avg = vec![T::zero(); n * c];
        for l in &inputs.client_logits {
            for (a, &x) in avg.iter_mut().zip(l.data()) {
                *a += x * w;
            }
        }
        g.constant(Tensor::matrix(n, c, avg)?)
    };
    match (&inputs.z_ft, toggles.fine_tune, toggles.logit_adjust) {
        (Some(ft), true, true) => {
            let v = g.constant(inputs.feature_mean.clone());
            let gate_in = g.matvec(v, vars.u)?;
            let sigma = g.sigmoid(gate_in);
            let rest = g.one_minus(sigma);
            let ftv = g.constant(ft.clone());
            let a = g.mul_col(z_cl, sigma)?;
            let b = g.mul_col(ftv, rest)?;
            g.add(a, b)
        }
        (Some(ft), true, false) => Ok(g.constant(ft.clone())),
        (None, true, _) => Err(Error::invalid("fine-tuning is enabled but z_ft was not computed")),
        (_, false, _) => Ok(z_cl),
    }
}

/// Mean cross-entropy of `z'` on `inputs` and its gradient with respect to
/// every calibration parameter.
pub fn calibration_loss_and_gradients<T: Scalar>(
    params: &CalibrationParams<T>,
    inputs: &CalibrationInputs<T>,
    toggles: Toggles,
) -> Result<(T, CalibrationParams<T>)> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let z = calibrated_logits_graph(&mut g, inputs, vars, toggles)?;
    let loss = g.cross_entropy(z, &inputs.labels)?;
    let grads = g.backward(loss)?;
    let value = g.value(loss).item().expect("scalar loss");
    let grad_params = CalibrationParams {
        a_e: grads.get_or_zeros(vars.a_e).into_data(),
        b_e: grads.get_or_zeros(vars.b_e).data()[0],
        a_z: grads.get_or_zeros(vars.a_z).into_data(),
        b_z: grads.get_or_zeros(vars.b_z).into_data(),
        u: grads.get_or_zeros(vars.u).into_data(),
    };
    Ok((value, grad_params))
}

#[derive(Debug, Clone)]
pub struct CalibrationOutcome<T> {
    pub params: CalibrationParams<T>,
    /// `ŵ` when fine-tuning is on.
    pub fine_tuned: Option<MlpModel<T>>,
    /// Mean aux cross-entropy of `z'` before and after the calibration steps.
    pub initial_loss: T,
    pub final_loss: T,
}

impl<T: Scalar> CalibrationOutcome<T> {
    pub fn into_teacher_state(self, toggles: Toggles) -> TeacherState<T> {
        TeacherState {
            fine_tuned: self.fine_tuned,
            params: self.params,
            toggles,
        }
    }
}

/// Fine-tunes `ŵ` (when enabled), then runs `cfg.steps` Adam steps on the
/// calibration parameters over random aux mini-batches. Local models, the
/// global model and `ŵ` are never modified.
pub fn train_calibration<T: Scalar>(
    local_models: &[MlpModel<T>],
    global: &MlpModel<T>,
    aux: &LabeledDataset,
    cfg: &CalibrationTrainConfig,
    init: CalibrationParams<T>,
    seed: u64,
) -> Result<CalibrationOutcome<T>> {
    cfg.validate()?;
    check_aux(aux)?;
    init.validate(global.class_count(), global.feature_dim())?;
    let toggles = cfg.toggles;
    let fine_tuned = if toggles.fine_tune {
        Some(fine_tune_global(
            global,
            aux,
            cfg.fine_tune_steps,
            cfg.fine_tune_lr,
            cfg.fine_tune_batch_size,
            seed,
        )?)
    } else {
        None
    };

    let (x, y) = aux.full_batch::<T>();
    let inputs = CalibrationInputs::compute(local_models, fine_tuned.as_ref(), &x, y)?;
    let mut params = init;
    let (initial_loss, _) = calibration_loss_and_gradients(&params, &inputs, toggles)?;

    // Without logit adjustment no calibration parameter reaches z'.
    if toggles.logit_adjust && cfg.steps > 0 {
        let mut rng = rng_for(seed, &[stream::CALIBRATE]);
        let mut adam = AdamState::new(&params);
        let lr = T::lit(cfg.lr);
        let batch = cfg.batch_size.min(inputs.len());
        for _ in 0..cfg.steps {
            let mut idx = index::sample(&mut rng, inputs.len(), batch).into_vec();
            idx.sort_unstable();
            let (_, grads) = calibration_loss_and_gradients(&params, &inputs.subset(&idx), toggles)?;
            adam_step(&mut adam, &mut params, &grads, lr)?;
            params.validate(global.class_count(), global.feature_dim())?;
        }
    }
    let (final_loss, _) = calibration_loss_and_gradients(&params, &inputs, toggles)?;
    Ok(CalibrationOutcome {
        params,
        fine_tuned,
        initial_loss,
        final_loss,
    })
}
