//! Accuracy, harmonic mean and the per-round evaluation schedule.

use rayon::prelude::*;

use crate::autodiff::Scalar;
use crate::data::{ClientShard, Dataset, DgSchedule, Sample, Split, SplitPlan};
use crate::encoders::PatchPack;
use crate::error::{Error, Result};
use crate::model::{predict_packs, ClassView, FrozenBundle, ModelState};
use crate::objective::{Objective, ScoringMode};

pub const METRICS_HEADER: &str = "round,clients,mean_train_loss,local_acc,base_acc,new_acc,hm,params_sent";

/// Fraction of predictions equal to their labels.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::invalid("accuracy of an empty sample set"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `2ab / (a + b)`, and 0 when either side is 0. Equal inputs return
/// themselves exactly.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a <= 0.0 || b <= 0.0 {
        0.0
    } else if a == b {
        a
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Labelled test images with the candidate classes they are scored against.
#[derive(Clone, Debug)]
pub struct EvalSet<S> {
    pub name: String,
    pub view: ClassView<S>,
    pub packs: Vec<PatchPack<S>>,
    pub labels: Vec<usize>,
}

impl<S: Scalar> EvalSet<S> {
    pub fn new(
        name: impl Into<String>,
        bundle: &FrozenBundle<S>,
        classes: &[usize],
        samples: &[Sample],
        mode: ScoringMode,
    ) -> Result<Self> {
        let name = name.into();
        if samples.is_empty() {
            return Err(Error::invalid(format!("evaluation set `{name}` is empty")));
        }
        if let Some(s) = samples.iter().find(|s| !classes.contains(&s.label)) {
            return Err(Error::invalid(format!(
                "evaluation set `{name}`: label {} is not a candidate",
                s.label
            )));
        }
        Ok(Self {
            view: ClassView::new(&bundle.text, classes, mode)?,
            packs: samples
                .iter()
                .map(|s| bundle.vit.patchify(&s.image))
                .collect::<Result<_>>()?,
            labels: samples.iter().map(|s| s.label).collect(),
            name,
        })
    }

    pub fn predictions(&self, bundle: &FrozenBundle<S>, state: &ModelState<S>, objective: Objective) -> Result<Vec<usize>> {
        let packs: Vec<&PatchPack<S>> = self.packs.iter().collect();
        predict_packs(bundle, state, &self.view, objective, &packs)
    }

    pub fn accuracy(&self, bundle: &FrozenBundle<S>, state: &ModelState<S>, objective: Objective) -> Result<f64> {
        accuracy(&self.predictions(bundle, state, objective)?, &self.labels)
    }
}

/// The sets evaluated after every round.
///
/// * `local`: per client, its own classes.
/// * `base`: all training classes (in the training domains).
/// * `new`: held-out classes, or one set per held-out domain.
#[derive(Clone, Debug)]
pub struct EvalSuite<S> {
    pub local: Vec<EvalSet<S>>,
    pub base: EvalSet<S>,
    pub new: Vec<EvalSet<S>>,
}

impl<S: Scalar> EvalSuite<S> {
    /// Base-to-new: everything in the first domain, new classes held out.
    pub fn base_to_new(bundle: &FrozenBundle<S>, dataset: &Dataset, plan: &SplitPlan, mode: ScoringMode) -> Result<Self> {
        if plan.new.is_empty() {
            return Err(Error::Config("base-to-new evaluation needs at least one new class".into()));
        }
        let local = plan
            .clients
            .iter()
            .enumerate()
            .map(|(i, c)| EvalSet::new(format!("client{i}"), bundle, c, &dataset.samples(Split::Test, c, 0)?, mode))
            .collect::<Result<_>>()?;
        let base = EvalSet::new("base", bundle, &plan.base, &dataset.samples(Split::Test, &plan.base, 0)?, mode)?;
        let new = EvalSet::new("new", bundle, &plan.new, &dataset.samples(Split::Test, &plan.new, 0)?, mode)?;
        Ok(Self {
            local,
            base,
            new: vec![new],
        })
    }

    /// Domain generalization: clients' own domains for local accuracy, all
    /// training domains pooled for `base`, one `new` set per held-out domain.
    pub fn domain_generalization(
        bundle: &FrozenBundle<S>,
        dataset: &Dataset,
        plan: &SplitPlan,
        schedule: &DgSchedule,
        mode: ScoringMode,
    ) -> Result<Self> {
        let names: Vec<&str> = dataset.spec().domains.iter().map(|d| d.name.as_str()).collect();
        for &d in schedule.train_domains.iter().chain(&schedule.test_domains) {
            if d >= names.len() {
                return Err(Error::invalid(format!("schedule names domain {d}, dataset has {}", names.len())));
            }
        }
        let local = plan
            .clients
            .iter()
            .zip(&plan.client_domains)
            .enumerate()
            .map(|(i, (c, &d))| EvalSet::new(format!("client{i}"), bundle, c, &dataset.samples(Split::Test, c, d)?, mode))
            .collect::<Result<_>>()?;
        let mut seen = Vec::new();
        for &d in &schedule.train_domains {
            seen.extend(dataset.samples(Split::Test, &plan.base, d)?);
        }
        let base = EvalSet::new("base", bundle, &plan.base, &seen, mode)?;
        let new = schedule
            .test_domains
            .iter()
            .map(|&d| EvalSet::new(names[d], bundle, &plan.base, &dataset.samples(Split::Test, &plan.base, d)?, mode))
            .collect::<Result<_>>()?;
        Ok(Self { local, base, new })
    }
}

/// Accuracies of one evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Accuracies {
    pub local_acc: f64,
    pub base_acc: f64,
    /// Mean over the `new` sets.
    pub new_acc: f64,
    pub hm: f64,
    /// Accuracy of each `new` set by name.
    pub per_set: Vec<(String, f64)>,
}

pub fn evaluate_round<S: Scalar>(
    bundle: &FrozenBundle<S>,
    state: &ModelState<S>,
    objective: Objective,
    suite: &EvalSuite<S>,
) -> Result<Accuracies> {
    if suite.local.is_empty() || suite.new.is_empty() {
        return Err(Error::invalid("evaluation suite needs local and new sets"));
    }
    let sets: Vec<&EvalSet<S>> = suite.local.iter().chain([&suite.base]).chain(&suite.new).collect();
    let accs = sets
        .par_iter()
        .map(|s| s.accuracy(bundle, state, objective))
        .collect::<Result<Vec<f64>>>()?;
    let nl = suite.local.len();
    let local_acc = accs[..nl].iter().sum::<f64>() / nl as f64;
    let base_acc = accs[nl];
    let new_accs = &accs[nl + 1..];
    let new_acc = new_accs.iter().sum::<f64>() / new_accs.len() as f64;
    Ok(Accuracies {
        local_acc,
        base_acc,
        new_acc,
        hm: harmonic_mean(base_acc, new_acc),
        per_set: suite.new.iter().map(|s| s.name.clone()).zip(new_accs.iter().copied()).collect(),
    })
}

/// Per-domain accuracy over a domain-generalization schedule's held-out domains.
pub fn evaluate_dg<S: Scalar>(
    bundle: &FrozenBundle<S>,
    state: &ModelState<S>,
    objective: Objective,
    suite: &EvalSuite<S>,
) -> Result<Vec<(String, f64)>> {
    suite
        .new
        .par_iter()
        .map(|s| Ok((s.name.clone(), s.accuracy(bundle, state, objective)?)))
        .collect()
}

/// Local accuracy of one client restricted to its own classes.
pub fn client_accuracy<S: Scalar>(
    bundle: &FrozenBundle<S>,
    state: &ModelState<S>,
    objective: Objective,
    shard: &ClientShard,
    mode: ScoringMode,
) -> Result<f64> {
    EvalSet::new("shard", bundle, shard.classes(), shard.samples(), mode)?.accuracy(bundle, state, objective)
}

/// One row of the metrics file.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub round: usize,
    pub clients: usize,
    pub mean_train_loss: f64,
    pub local_acc: f64,
    pub base_acc: f64,
    pub new_acc: f64,
    pub hm: f64,
    pub params_sent: usize,
    /// Held-out domain accuracies (domain-generalization runs only).
    pub domain_accs: Vec<(String, f64)>,
}

impl MetricsRecord {
    pub fn new(round: usize, clients: usize, mean_train_loss: f64, params_sent: usize, acc: Accuracies, dg: bool) -> Self {
        Self {
            round,
            clients,
            mean_train_loss,
            local_acc: acc.local_acc,
            base_acc: acc.base_acc,
            new_acc: acc.new_acc,
            hm: acc.hm,
            params_sent,
            domain_accs: if dg { acc.per_set } else { Vec::new() },
        }
    }

    /// Header for a run; domain-generalization runs append `acc_<domain>` columns.
    pub fn header(domains: &[String]) -> String {
        let mut h = METRICS_HEADER.to_string();
        for d in domains {
            h.push_str(",acc_");
            h.push_str(d);
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut row = format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.round,
            self.clients,
            self.mean_train_loss,
            self.local_acc,
            self.base_acc,
            self.new_acc,
            self.hm,
            self.params_sent
        );
        for (_, a) in &self.domain_accs {
            row.push_str(&format!(",{a:.6}"));
        }
        row
    }
}

/// Full metrics file, LF-terminated.
pub fn metrics_csv(records: &[MetricsRecord], domains: &[String]) -> String {
    let mut s = MetricsRecord::header(domains);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}
