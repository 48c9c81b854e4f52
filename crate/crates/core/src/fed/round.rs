use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::fed::aggregate::fedavg_aggregate;
use crate::nn::MlpModel;
use crate::rng::{rng_for, stream};
use crate::scalar::Scalar;
use crate::train::{sgd_steps, steps_per_epoch};

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub dataset: LabeledDataset,
}

impl ClientState {
    pub fn size(&self) -> usize {
        self.dataset.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundConfig {
    pub total_rounds: usize,
    pub client_count: usize,
    /// Fraction of clients active per round, in `(0, 1]`.
    pub active_ratio: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub local_lr: f64,
    #[serde(default)]
    pub seed: u64,
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.client_count == 0 {
            return Err(Error::invalid("client_count must be >= 1"));
        }
        if !(self.active_ratio > 0.0 && self.active_ratio <= 1.0) {
            return Err(Error::invalid(format!("active_ratio must be in (0, 1], got {}", self.active_ratio)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.local_lr > 0.0) {
            return Err(Error::invalid("local_lr must be positive"));
        }
        Ok(())
    }

    /// `max(1, round(active_ratio · K))`, capped at `K`.
    pub fn selected_count(&self) -> usize {
        ((self.active_ratio * self.client_count as f64).round() as usize)
            .max(1)
            .min(self.client_count)
    }
}

/// Uniform sample without replacement, seeded by `(cfg.seed, round_index)`;
/// ids are returned ascending.
pub fn select_clients(round_index: usize, cfg: &RoundConfig) -> Vec<usize> {
    let mut rng = rng_for(cfg.seed, &[stream::SELECT, round_index as u64]);
    let mut ids: Vec<usize> = index::sample(&mut rng, cfg.client_count, cfg.selected_count()).into_vec();
    ids.sort_unstable();
    ids
}

#[derive(Debug, Clone)]
pub struct LocalUpdate<T> {
    pub model: MlpModel<T>,
    /// The client had no data; `model` is the unchanged global.
    pub no_op: bool,
}

/// `local_epochs` epochs of mini-batch SGD from a copy of `global`.
pub fn local_train<T: Scalar>(
    global: &MlpModel<T>,
    client: &ClientState,
    cfg: &RoundConfig,
    round_index: usize,
) -> Result<LocalUpdate<T>> {
    let mut model = global.clone();
    if client.dataset.is_empty() {
        return Ok(LocalUpdate { model, no_op: true });
    }
    if client.dataset.feature_dim() != global.input_dim() {
        return Err(Error::ShapeMismatch {
            context: "client features vs model input",
            expected: vec![global.input_dim()],
            actual: vec![client.dataset.feature_dim()],
        });
    }
    let mut rng = rng_for(cfg.seed, &[stream::LOCAL_TRAIN, round_index as u64, client.id as u64]);
    let steps = cfg.local_epochs * steps_per_epoch(client.size(), cfg.batch_size);
    sgd_steps(&mut model, &client.dataset, steps, cfg.batch_size, cfg.local_lr, &mut rng)?;
    Ok(LocalUpdate { model, no_op: false })
}

/// What the server sees after aggregation in one round.
pub struct ServerContext<'a, T> {
    pub round: usize,
    pub selected: &'a [usize],
    pub local_models: &'a [MlpModel<T>],
    pub sizes: &'a [usize],
    pub aggregated: &'a MlpModel<T>,
}

/// Server-side transform applied to the aggregated model before broadcast.
pub trait ServerStage<T: Scalar> {
    fn apply(&mut self, ctx: &ServerContext<'_, T>) -> Result<MlpModel<T>>;
}

/// Returns the aggregate untouched.
pub struct IdentityStage;

impl<T: Scalar> ServerStage<T> for IdentityStage {
    fn apply(&mut self, ctx: &ServerContext<'_, T>) -> Result<MlpModel<T>> {
        Ok(ctx.aggregated.clone())
    }
}

#[derive(Debug, Clone)]
pub struct FederationState<T> {
    pub global: MlpModel<T>,
    pub clients: Vec<ClientState>,
    /// Index of the next round to run.
    pub round: usize,
}

impl<T: Scalar> FederationState<T> {
    pub fn new(global: MlpModel<T>, datasets: Vec<LabeledDataset>) -> Self {
        let clients = datasets
            .into_iter()
            .enumerate()
            .map(|(id, dataset)| ClientState { id, dataset })
            .collect();
        Self {
            global,
            clients,
            round: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RoundOutput<T> {
    pub round: usize,
    pub selected: Vec<usize>,
    pub local_models: Vec<MlpModel<T>>,
    pub sizes: Vec<usize>,
    pub no_op_clients: Vec<usize>,
    /// FedAvg aggregate of the local models.
    pub aggregated: MlpModel<T>,
    /// Model broadcast for the next round (aggregate after the server stage).
    pub global: MlpModel<T>,
}

/// select → local_train (parallel over clients) → fedavg → server stage.
///
/// If every selected client is empty the aggregate is the previous global.
pub fn run_round<T: Scalar>(
    state: &mut FederationState<T>,
    cfg: &RoundConfig,
    server_stage: Option<&mut dyn ServerStage<T>>,
) -> Result<RoundOutput<T>> {
    if state.clients.len() != cfg.client_count {
        return Err(Error::invalid(format!(
            "state has {} clients, config expects {}",
            state.clients.len(),
            cfg.client_count
        )));
    }
    let round = state.round;
    let selected = select_clients(round, cfg);
    let global = &state.global;
    let updates: Vec<LocalUpdate<T>> = selected
        .par_iter()
        .map(|&k| local_train(global, &state.clients[k], cfg, round))
        .collect::<Result<_>>()?;
    let sizes: Vec<usize> = selected.iter().map(|&k| state.clients[k].size()).collect();
    let no_op_clients: Vec<usize> = selected
        .iter()
        .zip(&updates)
        .filter(|(_, u)| u.no_op)
        .map(|(&k, _)| k)
        .collect();
    let local_models: Vec<MlpModel<T>> = updates.into_iter().map(|u| u.model).collect();

    let aggregated = if sizes.iter().all(|&n| n == 0) {
        state.global.clone()
    } else {
        let refs: Vec<&MlpModel<T>> = local_models.iter().collect();
        fedavg_aggregate(&refs, &sizes)?
    };

    let next = match server_stage {
        Some(stage) => stage.apply(&ServerContext {
            round,
            selected: &selected,
            local_models: &local_models,
            sizes: &sizes,
            aggregated: &aggregated,
        })?,
        None => aggregated.clone(),
    };
    state.global = next.clone();
    state.round += 1;
    Ok(RoundOutput {
        round,
        selected,
        local_models,
        sizes,
        no_op_clients,
        aggregated,
        global: next,
    })
}
