//! Builds a complete run from a [`RunConfig`] and drives it: dataset, frozen
//! encoders, split plan, client shards, evaluation suite and federation.

use std::path::Path;

use rayon::prelude::*;

use crate::autodiff::{Scalar, Tensor};
use crate::checkpoint::Checkpoint;
use crate::config::{Precision, RunConfig, RunMode};
use crate::data::{
    build_shards, dg_schedule, load_attribute_file, make_synthetic_dataset, plan_splits, random_attribute_map, Dataset,
    DatasetSpec, DgMode, DgSchedule, DomainTransform, SplitPlan,
};
use crate::encoders::{AugmentConfig, FrozenVit, FrozenVitConfig, TextEmbeddingStore};
use crate::error::{Error, Result};
use crate::eval::{evaluate_round, metrics_csv, EvalSuite, MetricsRecord};
use crate::fed::{
    batch_indices, batch_loss_and_grads, batch_loss_value, ledger_report, run_federation, ClientRecord,
    FederationConfig, LedgerReport, ServerState, TrainSettings,
};
use crate::model::{FrozenBundle, ModelState, Trainable};
use crate::objective::{Objective, ScoringConfig, ScoringMode};
use crate::promptformer::{LoraBank, PromptFormerConfig, PromptFormerParams};
use crate::rng;

pub const METRICS_FILE: &str = "metrics.csv";
pub const LEDGER_FILE: &str = "ledger.csv";
pub const CHECKPOINT_FILE: &str = "final.fmvp";
pub const RESOLVED_FILE: &str = "resolved.cfg";

/// Sub-seed for one named consumer of the master seed.
pub fn sub_seed(cfg: &RunConfig, tag: &str) -> u64 {
    rng::derive(cfg.seed, tag, &[])
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Invalid(msg) => Error::Config(msg),
        other => other,
    }
}

pub fn scoring_mode(cfg: &RunConfig) -> ScoringMode {
    if cfg.scoring == "plain" {
        ScoringMode::Plain
    } else {
        ScoringMode::Desc
    }
}

/// Synthetic dataset description: class and attribute names either come from
/// the attribute file or are generated (`class00`, `attr00`, ...).
pub fn dataset_spec(cfg: &RunConfig) -> Result<DatasetSpec> {
    let (class_names, attribute_pool, class_attributes) = match &cfg.attribute_file {
        Some(path) => {
            let map = load_attribute_file(path)?;
            if map.len() != cfg.num_classes {
                return Err(Error::Config(format!(
                    "data.num_classes: {} but {} lists {} classes",
                    cfg.num_classes,
                    path.display(),
                    map.len()
                )));
            }
            let mut pool: Vec<String> = Vec::new();
            let mut per_class = Vec::with_capacity(map.len());
            for (_, attrs) in &map {
                let mut ids = Vec::with_capacity(attrs.len());
                for a in attrs {
                    let id = match pool.iter().position(|p| p == a) {
                        Some(i) => i,
                        None => {
                            pool.push(a.clone());
                            pool.len() - 1
                        }
                    };
                    ids.push(id);
                }
                per_class.push(ids);
            }
            (map.into_iter().map(|(c, _)| c).collect(), pool, per_class)
        }
        None => {
            let names = (0..cfg.num_classes).map(|k| format!("class{k:02}")).collect();
            let pool = (0..cfg.attribute_pool).map(|a| format!("attr{a:02}")).collect();
            let map = random_attribute_map(
                cfg.num_classes,
                cfg.attribute_pool,
                cfg.attributes_per_class,
                sub_seed(cfg, "attributes"),
            )
            .map_err(as_config)?;
            (names, pool, map)
        }
    };
    let domains = cfg
        .domains
        .iter()
        .map(|d| DomainTransform::named(d, cfg.channels))
        .collect::<Result<_>>()?;
    let spec = DatasetSpec {
        class_names,
        attribute_pool,
        class_attributes,
        train_per_class: cfg.train_per_class,
        test_per_class: cfg.test_per_class,
        channels: cfg.channels,
        height: cfg.image_size,
        width: cfg.image_size,
        noise_std: cfg.noise_std,
        blob_sigma: cfg.blob_sigma,
        domains,
        seed: sub_seed(cfg, "dataset"),
    };
    spec.validate().map_err(as_config)?;
    Ok(spec)
}

pub fn vit_config(cfg: &RunConfig) -> FrozenVitConfig {
    FrozenVitConfig {
        patch_grid: cfg.patch_grid,
        d_v: cfg.d_v,
        d_out: cfg.d_t,
        depth: cfg.depth,
        heads: cfg.encoder_heads,
        channels: cfg.channels,
        image_height: cfg.image_size,
        image_width: cfg.image_size,
        seed: sub_seed(cfg, "vit"),
    }
}

pub fn promptformer_config(cfg: &RunConfig) -> PromptFormerConfig {
    PromptFormerConfig {
        d_ff: cfg.d_ff(),
        ..PromptFormerConfig::new(cfg.m, cfg.d_v, cfg.d_t, cfg.heads)
    }
}

pub fn objective(cfg: &RunConfig) -> Result<Objective> {
    Objective::new(ScoringConfig {
        tau: cfg.tau,
        alpha: cfg.alpha,
        mode: scoring_mode(cfg),
    })
    .map_err(as_config)
}

pub fn train_settings(cfg: &RunConfig) -> Result<TrainSettings> {
    Ok(TrainSettings {
        iterations: cfg.local_iterations,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        clip_norm: cfg.clip_norm,
        lora_threshold: cfg.lora_threshold,
        lora_rank: cfg.lora_rank,
        objective: objective(cfg)?,
        augment: AugmentConfig {
            max_shift: cfg.augment_shift,
            noise_frac: cfg.augment_noise,
        },
    })
}

fn dg_mode(mode: RunMode) -> Option<DgMode> {
    match mode {
        RunMode::Base2New => None,
        RunMode::Msst => Some(DgMode::Msst),
        RunMode::Ssmt => Some(DgMode::Ssmt),
    }
}

/// Split plan with client domains assigned for `mode`.
pub fn split_plan(cfg: &RunConfig, mode: RunMode) -> Result<(SplitPlan, Option<DgSchedule>)> {
    let mut plan = plan_splits(cfg.num_classes, cfg.classes_per_client, cfg.base_fraction, sub_seed(cfg, "split"))
        .map_err(|e| match e {
            Error::Invalid(msg) => Error::Config(format!("federation.classes_per_client: {msg}")),
            other => other,
        })?;
    let schedule = match dg_mode(mode) {
        None => None,
        Some(m) => {
            let s = dg_schedule(&cfg.domains, m, &cfg.dg_domain).map_err(as_config)?;
            plan.assign_domains(&s.train_domains)?;
            Some(s)
        }
    };
    Ok((plan, schedule))
}

/// Everything a run needs, materialized.
pub struct World<S: Scalar> {
    pub config: RunConfig,
    pub mode: RunMode,
    pub dataset: Dataset,
    pub bundle: FrozenBundle<S>,
    pub plan: SplitPlan,
    pub schedule: Option<DgSchedule>,
    pub clients: Vec<ClientRecord<S>>,
    pub suite: EvalSuite<S>,
    pub settings: TrainSettings,
}

impl<S: Scalar> World<S> {
    /// Builds the run described by `cfg`, evaluated under `mode`.
    pub fn build(cfg: &RunConfig, mode: RunMode) -> Result<Self> {
        let mut cfg = cfg.clone();
        cfg.mode = mode;
        cfg.validate()?;
        let spec = dataset_spec(&cfg)?;
        let attrs: Vec<Vec<String>> = (0..spec.num_classes()).map(|k| spec.attribute_names(k)).collect();
        let text = TextEmbeddingStore::synthesize(&spec.class_names, &attrs, cfg.d_t, sub_seed(&cfg, "text"))?;
        let vit = FrozenVit::build(vit_config(&cfg)).map_err(as_config)?;
        let bundle = FrozenBundle { vit, text };
        let dataset = make_synthetic_dataset(spec)?;
        let (plan, schedule) = split_plan(&cfg, mode)?;
        let scoring = scoring_mode(&cfg);
        let shards = build_shards(&dataset, &plan, cfg.shots, sub_seed(&cfg, "shots"))?;
        let clients = shards
            .into_iter()
            .map(|s| ClientRecord::new(&bundle, s, scoring))
            .collect::<Result<Vec<_>>>()?;
        let suite = match &schedule {
            None => EvalSuite::base_to_new(&bundle, &dataset, &plan, scoring)?,
            Some(s) => EvalSuite::domain_generalization(&bundle, &dataset, &plan, s, scoring)?,
        };
        let settings = train_settings(&cfg)?;
        Ok(Self {
            config: cfg,
            mode,
            dataset,
            bundle,
            plan,
            schedule,
            clients,
            suite,
            settings,
        })
    }

    pub fn initial_model(&self) -> Result<ModelState<S>> {
        let params = PromptFormerParams::init(promptformer_config(&self.config), sub_seed(&self.config, "promptformer"))
            .map_err(as_config)?;
        Ok(ModelState { params, lora: None })
    }

    pub fn federation_config(&self) -> FederationConfig {
        FederationConfig {
            rounds: self.config.rounds,
            participation_rate: self.config.participation_rate,
            seed: sub_seed(&self.config, "federation"),
            settings: self.settings.clone(),
            threads: None,
            domain_metrics: self.schedule.is_some(),
        }
    }

    /// Extra per-domain metric columns (DG runs only).
    pub fn metric_domains(&self) -> Vec<String> {
        match &self.schedule {
            None => Vec::new(),
            Some(_) => self.suite.new.iter().map(|s| s.name.clone()).collect(),
        }
    }
}

/// Contents of the four output files plus the ledger summary.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub metrics_csv: String,
    pub ledger_csv: String,
    pub checkpoint: Vec<u8>,
    pub resolved: String,
    pub report: LedgerReport,
    pub history: Vec<MetricsRecord>,
    /// Frozen encoder and text store checksums before and after the run.
    pub frozen_before: (u64, u64),
    pub frozen_after: (u64, u64),
}

impl RunArtifacts {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(METRICS_FILE), &self.metrics_csv)?;
        std::fs::write(dir.join(LEDGER_FILE), &self.ledger_csv)?;
        std::fs::write(dir.join(CHECKPOINT_FILE), &self.checkpoint)?;
        std::fs::write(dir.join(RESOLVED_FILE), &self.resolved)?;
        Ok(())
    }
}

/// Trains the configured run in its configured precision.
pub fn run_training(cfg: &RunConfig) -> Result<RunArtifacts> {
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg),
        Precision::F64 => run_typed::<f64>(cfg),
    }
}

pub fn run_typed<S: Scalar>(cfg: &RunConfig) -> Result<RunArtifacts> {
    let mut world = World::<S>::build(cfg, cfg.mode)?;
    let frozen_before = world.bundle.checksums();
    let initial = world.initial_model()?;
    let fed = world.federation_config();
    let outcome = run_federation(&world.bundle, &mut world.clients, &world.suite, initial, &fed)?;
    let frozen_after = world.bundle.checksums();
    let pf = promptformer_config(&world.config);
    let report = ledger_report(&outcome.ledger, pf.full_count(), pf.lora_count(world.config.lora_rank));
    Ok(RunArtifacts {
        metrics_csv: metrics_csv(&outcome.server.history, &world.metric_domains()),
        ledger_csv: outcome.ledger.to_csv(),
        checkpoint: outcome.server.to_checkpoint()?.to_bytes(),
        resolved: world.config.echo(),
        report,
        history: outcome.server.history,
        frozen_before,
        frozen_after,
    })
}

/// Re-evaluates a saved model under `mode`. Returns the metrics header and
/// the row; the bookkeeping columns come from the checkpoint's metadata.
pub fn evaluate_checkpoint(cfg: &RunConfig, mode: RunMode, bytes: &[u8]) -> Result<(String, MetricsRecord)> {
    let ck = Checkpoint::from_bytes(bytes)?;
    match cfg.precision {
        Precision::F32 => evaluate_typed::<f32>(cfg, mode, &ck),
        Precision::F64 => evaluate_typed::<f64>(cfg, mode, &ck),
    }
}

fn evaluate_typed<S: Scalar>(cfg: &RunConfig, mode: RunMode, ck: &Checkpoint) -> Result<(String, MetricsRecord)> {
    let world = World::<S>::build(cfg, mode)?;
    let model = ServerState::<S>::model_from_checkpoint(ck, promptformer_config(&world.config))?;
    let acc = evaluate_round(&world.bundle, &model, world.settings.objective, &world.suite)?;
    let meta = |name: &str| ck.scalar(name).unwrap_or(0.0);
    let record = MetricsRecord::new(
        meta("meta/round") as usize,
        meta("meta/clients") as usize,
        meta("meta/mean_train_loss"),
        meta("meta/params_sent") as usize,
        acc,
        world.schedule.is_some(),
    );
    Ok((MetricsRecord::header(&world.metric_domains()), record))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOutcome {
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: String,
    pub coordinates: usize,
    pub loss: f64,
}

/// Central-difference step used by [`gradcheck`].
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

/// Adds a step to one coordinate of one tensor.
type Perturb<'a> = &'a (dyn Fn(&mut ModelState<f64>, usize, usize, f64) + Sync);
type LossAt<'a> = &'a (dyn Fn(&ModelState<f64>) -> Result<f64> + Sync);

fn numeric_check(
    names: &[String],
    analytic: &[Tensor<f64>],
    base_state: &ModelState<f64>,
    perturb: Perturb<'_>,
    loss_at: LossAt<'_>,
) -> Result<(f64, String, usize)> {
    let coords: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .flat_map(|(t, g)| (0..g.numel()).map(move |c| (t, c)))
        .collect();
    let errors = coords
        .par_iter()
        .map(|&(t, c)| {
            let mut plus = base_state.clone();
            perturb(&mut plus, t, c, GRADCHECK_STEP);
            let mut minus = base_state.clone();
            perturb(&mut minus, t, c, -GRADCHECK_STEP);
            let numeric = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * GRADCHECK_STEP);
            let a = analytic[t].data()[c];
            Ok((a - numeric).abs() / numeric.abs().max(1.0))
        })
        .collect::<Result<Vec<f64>>>()?;
    let (worst_i, worst) = errors
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    let (t, c) = coords[worst_i];
    Ok((worst, format!("{}[{c}]", names[t]), coords.len()))
}

/// End-to-end gradient check of the batch training loss in double precision,
/// over every generator weight and every adapter weight. `corrupt` perturbs
/// one analytic coordinate (a negative control).
pub fn gradcheck(cfg: &RunConfig, corrupt: bool) -> Result<GradcheckOutcome> {
    let mut cfg = cfg.clone();
    cfg.precision = Precision::F64;
    let world = World::<f64>::build(&cfg, cfg.mode)?;
    let client = world.clients.first().ok_or_else(|| Error::Config("no clients".into()))?;
    let fed_seed = sub_seed(&cfg, "federation");
    let idx = batch_indices(client.shard.len(), cfg.batch_size, fed_seed, 0, client.id, 0);
    let settings = &world.settings;
    let bundle = &world.bundle;
    let loss_at = |s: &ModelState<f64>| batch_loss_value(bundle, s, client, settings, &idx, fed_seed, 0, 0);

    let mut state = world.initial_model()?;
    // Live adapters: nonzero up factors so every adapter weight matters.
    let mut bank = LoraBank::inject(&state.params, cfg.lora_rank, rng::derive(fed_seed, "gradcheck-lora", &[]))?;
    let mut r = rng::child_rng(fed_seed, "gradcheck-up", &[]);
    for (_, up) in bank.pairs.iter_mut() {
        *up = Tensor::randn(up.shape(), 0.02, &mut r);
    }
    state.lora = Some(bank);

    let (loss, mut base_grads) =
        batch_loss_and_grads(bundle, &state, client, settings, Trainable::Base, &idx, fed_seed, 0, 0)?;
    let (_, lora_grads) = batch_loss_and_grads(bundle, &state, client, settings, Trainable::Lora, &idx, fed_seed, 0, 0)?;
    if corrupt {
        base_grads[0].data_mut()[0] += 1e-2;
    }

    let base_names = PromptFormerParams::<f64>::names();
    let (e1, w1, n1) = numeric_check(
        &base_names,
        &base_grads,
        &state,
        &|s, t, c, h| s.params.tensors_mut()[t].data_mut()[c] += h,
        &loss_at,
    )?;
    let lora_names = LoraBank::<f64>::names();
    let (e2, w2, n2) = numeric_check(
        &lora_names,
        &lora_grads,
        &state,
        &|s, t, c, h| s.lora.as_mut().expect("bank present").tensors_mut()[t].data_mut()[c] += h,
        &loss_at,
    )?;
    let (max_rel_error, worst) = if e2 > e1 { (e2, w2) } else { (e1, w1) };
    Ok(GradcheckOutcome {
        max_rel_error,
        worst,
        coordinates: n1 + n2,
        loss,
    })
}

/// The split plan as audit text: base and new lists, then one line per client.
pub fn partition_report(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    let (plan, _) = split_plan(cfg, cfg.mode)?;
    Ok(plan.to_string())
}
