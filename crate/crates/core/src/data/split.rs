//! Base/new class splits, disjoint client class sets, few-shot shards and
//! domain-generalization schedules.

use std::fmt;

use rand::seq::{index, SliceRandom};

use super::synthetic::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SplitPlan {
    /// Sorted.
    pub base: Vec<usize>,
    /// Sorted.
    pub new: Vec<usize>,
    /// Per client, sorted class ids.
    pub clients: Vec<Vec<usize>>,
    /// Per client, the single domain it trains on.
    pub client_domains: Vec<usize>,
}

impl SplitPlan {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    /// Checks disjointness and coverage.
    pub fn validate(&self) -> Result<()> {
        let mut seen: Vec<usize> = self.clients.iter().flatten().copied().collect();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("client class sets overlap"));
        }
        if seen != self.base {
            return Err(Error::invalid("client class sets do not cover the base classes"));
        }
        if self.base.iter().any(|k| self.new.binary_search(k).is_ok()) {
            return Err(Error::invalid("base and new classes overlap"));
        }
        if self.client_domains.len() != self.clients.len() {
            return Err(Error::invalid("one domain per client is required"));
        }
        Ok(())
    }

    /// Assigns training domains to clients round-robin.
    pub fn assign_domains(&mut self, train_domains: &[usize]) -> Result<()> {
        if train_domains.is_empty() {
            return Err(Error::invalid("no training domains"));
        }
        self.client_domains = (0..self.clients.len())
            .map(|i| train_domains[i % train_domains.len()])
            .collect();
        Ok(())
    }
}

fn join(ids: &[usize]) -> String {
    ids.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",")
}

impl fmt::Display for SplitPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "base: {}", join(&self.base))?;
        writeln!(f, "new: {}", join(&self.new))?;
        for (i, (c, d)) in self.clients.iter().zip(&self.client_domains).enumerate() {
            writeln!(f, "client {i} domain {d}: {}", join(c))?;
        }
        Ok(())
    }
}

/// Shuffles classes, keeps `round(base_fraction * K)` of them as base classes
/// and deals those out to clients in chunks of `classes_per_client` (the last
/// chunk may be smaller). Every client starts on domain 0.
pub fn plan_splits(num_classes: usize, classes_per_client: usize, base_fraction: f64, seed: u64) -> Result<SplitPlan> {
    if classes_per_client == 0 {
        return Err(Error::invalid("classes_per_client must be positive"));
    }
    if !(0.0..=1.0).contains(&base_fraction) {
        return Err(Error::invalid(format!("base_fraction {base_fraction} outside [0, 1]")));
    }
    let n_base = (base_fraction * num_classes as f64).round() as usize;
    if n_base < classes_per_client {
        return Err(Error::invalid(format!(
            "{n_base} base classes cannot fill a client of {classes_per_client}"
        )));
    }
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(&mut rng::child_rng(seed, "split", &[]));
    let (base, new) = order.split_at(n_base);
    let clients: Vec<Vec<usize>> = base
        .chunks(classes_per_client)
        .map(|c| {
            let mut c = c.to_vec();
            c.sort_unstable();
            c
        })
        .collect();
    let mut base = base.to_vec();
    let mut new = new.to_vec();
    base.sort_unstable();
    new.sort_unstable();
    Ok(SplitPlan {
        client_domains: vec![0; clients.len()],
        base,
        new,
        clients,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DgMode {
    /// Leave one domain out: train on the rest, test on it.
    Msst,
    /// Train on one source domain, test on all others.
    Ssmt,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DgSchedule {
    pub mode: DgMode,
    pub train_domains: Vec<usize>,
    pub test_domains: Vec<usize>,
}

/// `domain` is the held-out domain for MSST and the source domain for SSMT.
pub fn dg_schedule(domain_names: &[String], mode: DgMode, domain: &str) -> Result<DgSchedule> {
    if domain_names.len() < 2 {
        return Err(Error::invalid("domain generalization needs at least two domains"));
    }
    let chosen = domain_names
        .iter()
        .position(|d| d == domain)
        .ok_or_else(|| Error::Config(format!("unknown domain `{domain}`")))?;
    let others: Vec<usize> = (0..domain_names.len()).filter(|&d| d != chosen).collect();
    Ok(match mode {
        DgMode::Msst => DgSchedule {
            mode,
            train_domains: others,
            test_domains: vec![chosen],
        },
        DgMode::Ssmt => DgSchedule {
            mode,
            train_domains: vec![chosen],
            test_domains: others,
        },
    })
}

/// One client's read-only local dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    classes: Vec<usize>,
    samples: Vec<Sample>,
    domain: usize,
}

impl ClientShard {
    pub fn new(client_id: usize, classes: Vec<usize>, samples: Vec<Sample>, domain: usize) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::invalid(format!("client {client_id} has no classes")));
        }
        if let Some(s) = samples.iter().find(|s| !classes.contains(&s.label)) {
            return Err(Error::invalid(format!(
                "client {client_id}: sample label {} outside its class set",
                s.label
            )));
        }
        if samples.iter().any(|s| s.domain != domain) {
            return Err(Error::invalid(format!("client {client_id}: samples from more than one domain")));
        }
        Ok(Self {
            client_id,
            classes,
            samples,
            domain,
        })
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn domain(&self) -> usize {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Keeps exactly `shots` samples per class, chosen without replacement and
/// kept in their original order.
pub fn few_shot_subsample(shard: &ClientShard, shots: usize, seed: u64) -> Result<ClientShard> {
    let mut keep = Vec::new();
    for &k in &shard.classes {
        let idx: Vec<usize> = (0..shard.samples.len()).filter(|&i| shard.samples[i].label == k).collect();
        if idx.len() < shots {
            return Err(Error::invalid(format!(
                "client {}: class {k} has {} samples, {shots} shots requested",
                shard.client_id,
                idx.len()
            )));
        }
        let mut r = rng::child_rng(seed, "few-shot", &[shard.client_id as u64, k as u64]);
        let mut chosen: Vec<usize> = index::sample(&mut r, idx.len(), shots).into_iter().map(|j| idx[j]).collect();
        chosen.sort_unstable();
        keep.extend(chosen);
    }
    keep.sort_unstable();
    let samples = keep.into_iter().map(|i| shard.samples[i].clone()).collect();
    ClientShard::new(shard.client_id, shard.classes.clone(), samples, shard.domain)
}

/// Materializes every client's few-shot training shard.
pub fn build_shards(dataset: &Dataset, plan: &SplitPlan, shots: usize, seed: u64) -> Result<Vec<ClientShard>> {
    plan.validate()?;
    plan.clients
        .iter()
        .zip(&plan.client_domains)
        .enumerate()
        .map(|(i, (classes, &domain))| {
            let full = ClientShard::new(i, classes.clone(), dataset.samples(Split::Train, classes, domain)?, domain)?;
            few_shot_subsample(&full, shots, seed)
        })
        .collect()
}
