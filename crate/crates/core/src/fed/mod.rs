//! The federated protocol: client sampling, local training with the adapter
//! switch, bucketed averaging and communication accounting.

mod aggregate;
mod client;
mod ledger;
mod server;

pub use aggregate::{aggregate, average_named, elementwise_mean, exact_mean};
pub use client::{batch_indices, batch_loss_and_grads, batch_loss_value, client_local_train, ClientPayload, ClientRecord, TrainSettings};
pub use ledger::{ledger_report, CommLedger, LedgerEntry, LedgerReport, RoundSummary, REFERENCE_RATIO};
pub use server::{
    run_federation, select_clients, thread_count, train_round, FederationConfig, FederationOutcome, ServerState,
    THREADS_ENV,
};
