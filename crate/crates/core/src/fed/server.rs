//! Server state, client sampling and the round loop.

use log::{debug, info};
use rand::seq::index;
use rayon::prelude::*;

use super::aggregate::aggregate;
use super::client::{client_local_train, ClientPayload, ClientRecord, TrainSettings};
use super::ledger::CommLedger;
use crate::autodiff::Scalar;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::{evaluate_round, EvalSuite, MetricsRecord};
use crate::model::{FrozenBundle, ModelState};
use crate::promptformer::{LoraBank, PromptFormerConfig, PromptFormerParams};
use crate::rng;

/// Environment variable capping client-training threads.
pub const THREADS_ENV: &str = "FMVP_THREADS";

#[derive(Clone, Debug, PartialEq)]
pub struct ServerState<S> {
    /// Completed rounds.
    pub round: usize,
    pub model: ModelState<S>,
    pub seed: u64,
    pub history: Vec<MetricsRecord>,
}

impl<S: Scalar> ServerState<S> {
    pub fn new(model: ModelState<S>, seed: u64) -> Self {
        Self {
            round: 0,
            model,
            seed,
            history: Vec::new(),
        }
    }

    /// Model tensors plus `meta/*` scalars describing the last round.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        for (name, t) in self.model.params.named() {
            ck.push(name, t)?;
        }
        if let Some(bank) = &self.model.lora {
            for (name, t) in bank.named() {
                ck.push(name, t)?;
            }
            ck.push_scalar("meta/lora_scale", bank.scale())?;
        }
        ck.push_scalar("meta/round", self.round as f64)?;
        if let Some(last) = self.history.last() {
            ck.push_scalar("meta/clients", last.clients as f64)?;
            ck.push_scalar("meta/mean_train_loss", last.mean_train_loss)?;
            ck.push_scalar("meta/params_sent", last.params_sent as f64)?;
        }
        Ok(ck)
    }

    /// Restores model weights; every tensor must match `config`'s shapes.
    pub fn model_from_checkpoint(ck: &Checkpoint, config: PromptFormerConfig) -> Result<ModelState<S>> {
        let mut params = PromptFormerParams::<S>::init(config, 0)?;
        let values = PromptFormerParams::<S>::names()
            .into_iter()
            .map(|n| Ok((n.clone(), ck.tensor::<S>(&n)?)))
            .collect::<Result<Vec<_>>>()?;
        params.assign(&values)?;
        let lora_values = ck.with_prefix::<S>("lora.");
        let lora = if lora_values.is_empty() {
            None
        } else {
            let scale = ck.scalar("meta/lora_scale").unwrap_or(1.0);
            let bank = LoraBank::from_named(&lora_values, scale)?;
            if bank.d_v() != config.d_v {
                return Err(Error::TensorMismatch {
                    name: lora_values[0].0.clone(),
                    detail: format!("width {} vs d_v {}", bank.d_v(), config.d_v),
                });
            }
            Some(bank)
        };
        let known = |n: &str| n.starts_with("meta/") || n.starts_with("lora.") || PromptFormerParams::<S>::names().iter().any(|x| x == n);
        if let Some(extra) = ck.names().find(|n| !known(n)) {
            return Err(Error::TensorMismatch {
                name: extra.to_string(),
                detail: "unexpected tensor in checkpoint".into(),
            });
        }
        Ok(ModelState { params, lora })
    }
}

/// `ceil(rate * n)` distinct client ids, ascending, drawn from a generator
/// seeded by `(seed, round)`.
pub fn select_clients(num_clients: usize, rate: f64, seed: u64, round: usize) -> Result<Vec<usize>> {
    if num_clients == 0 {
        return Err(Error::invalid("no clients to select from"));
    }
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::invalid(format!("participation rate {rate} outside (0, 1]")));
    }
    let k = ((rate * num_clients as f64).ceil() as usize).clamp(1, num_clients);
    let mut r = rng::child_rng(seed, "select", &[round as u64]);
    let mut ids = index::sample(&mut r, num_clients, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederationConfig {
    pub rounds: usize,
    pub participation_rate: f64,
    pub seed: u64,
    pub settings: TrainSettings,
    /// Worker threads; `None` reads the environment (default: all cores).
    pub threads: Option<usize>,
    /// Keep per-domain accuracies in the metrics.
    pub domain_metrics: bool,
}

#[derive(Clone, Debug)]
pub struct FederationOutcome<S> {
    pub server: ServerState<S>,
    pub ledger: CommLedger,
}

pub fn thread_count(explicit: Option<usize>) -> usize {
    explicit
        .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()))
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Trains the selected clients of one round over a shared snapshot.
pub fn train_round<S: Scalar>(
    bundle: &FrozenBundle<S>,
    snapshot: &ModelState<S>,
    clients: &[ClientRecord<S>],
    selected: &[usize],
    settings: &TrainSettings,
    round: usize,
    seed: u64,
) -> Result<Vec<ClientPayload<S>>> {
    selected
        .par_iter()
        .map(|&i| client_local_train(bundle, snapshot, &clients[i], settings, round, seed))
        .collect()
}

/// Runs `config.rounds` rounds of select, broadcast, local training,
/// aggregation and evaluation.
pub fn run_federation<S: Scalar>(
    bundle: &FrozenBundle<S>,
    clients: &mut [ClientRecord<S>],
    suite: &EvalSuite<S>,
    initial: ModelState<S>,
    config: &FederationConfig,
) -> Result<FederationOutcome<S>> {
    for (i, c) in clients.iter().enumerate() {
        if c.id != i {
            return Err(Error::invalid(format!("client at position {i} has id {}", c.id)));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count(config.threads))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let mut server = ServerState::new(initial, config.seed);
    let mut ledger = CommLedger::new();
    for r in 0..config.rounds {
        let selected = select_clients(clients.len(), config.participation_rate, config.seed, r)?;
        let snapshot = server.model.clone();
        let payloads = pool.install(|| train_round(bundle, &snapshot, clients, &selected, &config.settings, r, config.seed))?;
        server.model = aggregate(&server.model, &payloads)?;
        if !server.model.is_finite() {
            return Err(Error::NonFinite { op: "aggregate" });
        }
        server.round += 1;

        let mut sorted: Vec<&ClientPayload<S>> = payloads.iter().collect();
        sorted.sort_by_key(|p| p.client_id);
        for p in &sorted {
            clients[p.client_id].lora_active = p.kind == crate::promptformer::PayloadKind::LoraOnly;
            debug!(
                "round {} client {}: {} initial loss {:.4}, final {:.4}",
                server.round,
                p.client_id,
                p.kind.as_str(),
                p.initial_loss,
                p.train_loss
            );
        }
        ledger.record_round(server.round, selected.clone(), sorted.iter().map(|p| (p.client_id, p.kind, p.param_count)));
        let mean_loss = sorted.iter().map(|p| p.train_loss).sum::<f64>() / sorted.len() as f64;
        let sent = sorted.iter().map(|p| p.param_count).sum();
        let acc = pool.install(|| evaluate_round(bundle, &server.model, config.settings.objective, suite))?;
        let record = MetricsRecord::new(server.round, selected.len(), mean_loss, sent, acc, config.domain_metrics);
        info!(
            "round {}: loss {:.4} local {:.3} base {:.3} new {:.3}",
            record.round, record.mean_train_loss, record.local_acc, record.base_acc, record.new_acc
        );
        server.history.push(record);
    }
    Ok(FederationOutcome { server, ledger })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_sizes() {
        assert_eq!(select_clients(6, 1.0, 1, 0).unwrap(), (0..6).collect::<Vec<_>>());
        assert_eq!(select_clients(50, 0.1, 1, 0).unwrap().len(), 5);
        assert_eq!(select_clients(7, 0.3, 1, 0).unwrap().len(), 3);
        assert_eq!(select_clients(50, 0.1, 9, 4).unwrap(), select_clients(50, 0.1, 9, 4).unwrap());
        let s = select_clients(50, 0.5, 2, 1).unwrap();
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert!(select_clients(0, 1.0, 0, 0).is_err());
        assert!(select_clients(5, 0.0, 0, 0).is_err());
        assert!(select_clients(5, 1.5, 0, 0).is_err());
    }

    #[test]
    fn rounds_draw_different_subsets() {
        let a: Vec<_> = (0..10).map(|r| select_clients(20, 0.25, 3, r).unwrap()).collect();
        assert!(a.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn thread_count_prefers_explicit() {
        assert_eq!(thread_count(Some(3)), 3);
        assert!(thread_count(None) >= 1);
    }
}
