//! Local training on one client.

use rand::seq::index;

use crate::autodiff::{clip_grad_norm, Scalar, SgdMomentum, Tensor, Var};
use crate::data::ClientShard;
use crate::encoders::{augment_with, AugmentConfig, PatchPack};
use crate::error::{Error, Result};
use crate::model::{ClassView, FrozenBundle, ModelState, ModelTape, Trainable};
use crate::objective::{Objective, ScoringMode};
use crate::promptformer::{param_count, LoraBank, PayloadKind};
use crate::rng;

/// Hyperparameters of local training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    /// Local SGD iterations per round.
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Joint gradient-norm cap per step; 0 disables clipping.
    pub clip_norm: f64,
    /// A client whose round-start loss is below this trains adapters only.
    pub lora_threshold: f64,
    pub lora_rank: usize,
    pub objective: Objective,
    pub augment: AugmentConfig,
}

impl TrainSettings {
    pub fn optimizer(&self) -> Result<SgdMomentum> {
        SgdMomentum::new(self.lr, self.momentum, self.weight_decay)
    }
}

/// A client with its shard and cached encoder inputs.
#[derive(Clone, Debug)]
pub struct ClientRecord<S> {
    pub id: usize,
    pub shard: ClientShard,
    pub view: ClassView<S>,
    /// Adapter mode chosen in the client's most recent round.
    pub lora_active: bool,
    packs: Vec<PatchPack<S>>,
    targets: Vec<usize>,
}

impl<S: Scalar> ClientRecord<S> {
    pub fn new(bundle: &FrozenBundle<S>, shard: ClientShard, mode: ScoringMode) -> Result<Self> {
        if shard.is_empty() {
            return Err(Error::invalid(format!("client {} has no samples", shard.client_id)));
        }
        let view = ClassView::new(&bundle.text, shard.classes(), mode)?;
        let packs = shard
            .samples()
            .iter()
            .map(|s| bundle.vit.patchify(&s.image))
            .collect::<Result<_>>()?;
        let targets = shard
            .samples()
            .iter()
            .map(|s| view.position(s.label).expect("shard labels are inside its class set"))
            .collect();
        Ok(Self {
            id: shard.client_id,
            shard,
            view,
            lora_active: false,
            packs,
            targets,
        })
    }
}

/// What a client sends back.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientPayload<S> {
    pub client_id: usize,
    pub kind: PayloadKind,
    pub tensors: Vec<(String, Tensor<S>)>,
    pub param_count: usize,
    /// Loss of the last local batch.
    pub train_loss: f64,
    /// Loss of the first batch before any update (the adapter trigger).
    pub initial_loss: f64,
}

/// Indices of the `iteration`-th batch.
pub fn batch_indices(n: usize, batch: usize, seed: u64, round: usize, client: usize, iteration: usize) -> Vec<usize> {
    if batch >= n {
        return (0..n).collect();
    }
    let mut r = rng::child_rng(seed, "batch", &[round as u64, client as u64, iteration as u64]);
    let mut idx = index::sample(&mut r, n, batch).into_vec();
    idx.sort_unstable();
    idx
}

fn divergence(e: Error, round: usize, client: usize, iteration: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged {
            round,
            client,
            iteration,
        },
        other => other,
    }
}

struct BatchLoss<'a, S: Scalar> {
    mt: ModelTape<'a, S>,
    loss: Var,
}

#[allow(clippy::too_many_arguments)]
fn batch_loss<'a, S: Scalar>(
    bundle: &'a FrozenBundle<S>,
    state: &ModelState<S>,
    client: &ClientRecord<S>,
    settings: &TrainSettings,
    trainable: Trainable,
    idx: &[usize],
    seed: u64,
    round: usize,
    iteration: usize,
) -> Result<BatchLoss<'a, S>> {
    let mut mt = ModelTape::new(bundle, state, &client.view, settings.objective, trainable)?;
    let mut totals = Vec::with_capacity(idx.len());
    for &i in idx {
        let aug_seed = rng::derive(seed, "augment", &[round as u64, client.id as u64, iteration as u64, i as u64]);
        let aug = augment_with(&client.shard.samples()[i].image, &settings.augment, aug_seed);
        let aug_pack = bundle.vit.patchify(&aug)?;
        let t = mt.sample_terms(&client.packs[i], client.targets[i], &aug_pack)?;
        totals.push(t.total);
    }
    let stacked = mt.tape.concat_rows(&totals)?;
    let loss = mt.tape.mean(stacked)?;
    Ok(BatchLoss { mt, loss })
}

/// Mean batch loss and its gradients with respect to the `trainable` group.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss_and_grads<S: Scalar>(
    bundle: &FrozenBundle<S>,
    state: &ModelState<S>,
    client: &ClientRecord<S>,
    settings: &TrainSettings,
    trainable: Trainable,
    idx: &[usize],
    seed: u64,
    round: usize,
    iteration: usize,
) -> Result<(f64, Vec<Tensor<S>>)> {
    let b = batch_loss(bundle, state, client, settings, trainable, idx, seed, round, iteration)?;
    let loss = b.mt.tape.value(b.loss).item().as_f64();
    let grads = b.mt.tape.backward(b.loss)?;
    let g: Vec<Tensor<S>> = b
        .mt
        .trainable_vars(trainable)
        .into_iter()
        .map(|v| grads.wrt(&b.mt.tape, v))
        .collect();
    if g.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite { op: "gradient" });
    }
    Ok((loss, g))
}

/// Mean batch loss without gradients.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss_value<S: Scalar>(
    bundle: &FrozenBundle<S>,
    state: &ModelState<S>,
    client: &ClientRecord<S>,
    settings: &TrainSettings,
    idx: &[usize],
    seed: u64,
    round: usize,
    iteration: usize,
) -> Result<f64> {
    let b = batch_loss(bundle, state, client, settings, Trainable::Nothing, idx, seed, round, iteration)?;
    Ok(b.mt.tape.value(b.loss).item().as_f64())
}

/// Runs `settings.iterations` local SGD steps from `snapshot`.
///
/// The first batch is scored before any update. If that loss is below the
/// threshold the base weights are frozen and only the adapter bank (taken
/// from the snapshot, or freshly injected) is trained and sent; otherwise the
/// full generator is trained and sent.
pub fn client_local_train<S: Scalar>(
    bundle: &FrozenBundle<S>,
    snapshot: &ModelState<S>,
    client: &ClientRecord<S>,
    settings: &TrainSettings,
    round: usize,
    seed: u64,
) -> Result<ClientPayload<S>> {
    if settings.iterations == 0 {
        return Err(Error::invalid("local iterations must be >= 1"));
    }
    if settings.batch_size == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    if !snapshot.is_finite() {
        return Err(Error::NonFinite { op: "snapshot" });
    }
    let opt = settings.optimizer()?;
    let n = client.packs.len();
    let first = batch_indices(n, settings.batch_size, seed, round, client.id, 0);
    let initial_loss = batch_loss_value(bundle, snapshot, client, settings, &first, seed, round, 0)
        .map_err(|e| divergence(e, round, client.id, 0))?;

    let lora_mode = initial_loss < settings.lora_threshold;
    let mut state = snapshot.clone();
    if lora_mode && state.lora.is_none() {
        let lora_seed = rng::derive(seed, "lora-init", &[round as u64]);
        state.lora = Some(LoraBank::inject(&state.params, settings.lora_rank, lora_seed)?);
    }
    let trainable = if lora_mode { Trainable::Lora } else { Trainable::Base };
    let mut velocity = match trainable {
        Trainable::Lora => SgdMomentum::init_velocity(&state.lora.as_ref().unwrap().tensors()),
        _ => SgdMomentum::init_velocity(&state.params.tensors()),
    };

    let mut train_loss = initial_loss;
    for it in 0..settings.iterations {
        let idx = if it == 0 {
            first.clone()
        } else {
            batch_indices(n, settings.batch_size, seed, round, client.id, it)
        };
        let (loss, mut g) = batch_loss_and_grads(bundle, &state, client, settings, trainable, &idx, seed, round, it)
            .map_err(|e| divergence(e, round, client.id, it))?;
        train_loss = loss;
        if settings.clip_norm > 0.0 {
            clip_grad_norm(&mut g, settings.clip_norm);
        }
        let mut params = match trainable {
            Trainable::Lora => state.lora.as_mut().unwrap().tensors_mut(),
            _ => state.params.tensors_mut(),
        };
        opt.step(&mut params, &g, &mut velocity)?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged {
                round,
                client: client.id,
                iteration: it,
            });
        }
    }

    let (kind, tensors) = if lora_mode {
        let bank = state.lora.as_ref().unwrap();
        (
            PayloadKind::LoraOnly,
            bank.named().into_iter().map(|(n, t)| (n, t.clone())).collect::<Vec<_>>(),
        )
    } else {
        (
            PayloadKind::FullParams,
            state.params.named().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        )
    };
    Ok(ClientPayload {
        client_id: client.id,
        kind,
        param_count: param_count(&state.params, kind, state.lora.as_ref())?,
        tensors,
        train_loss,
        initial_loss,
    })
}
