//! Federated round engine: client sampling, local SGD and FedAvg.

pub mod aggregate;
pub mod round;

pub use aggregate::{aggregation_weights, fedavg_aggregate};
pub use round::{
    local_train, run_round, select_clients, ClientState, FederationState, IdentityStage, LocalUpdate, RoundConfig,
    RoundOutput, ServerContext, ServerStage,
};
