//! Training and inference objective.
//!
//! Class probabilities use attribute-averaged scoring: for every attribute
//! slot `j` a temperature softmax over classes of `cos(v, T[k][j])` is taken,
//! and the per-slot distributions are averaged. A class with fewer attributes
//! than the widest class reuses its rows cyclically (`j mod J_k`), so each slot
//! always compares all K candidates and the average stays normalized. With a
//! single attribute per class this is the plain CLIP softmax.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::encoders::TextEmbeddingStore;
use crate::error::{Error, Result};

/// Probabilities below this are clamped before the log.
pub const PROB_FLOOR: f64 = 1e-12;

static CLAMP_WARNINGS: AtomicU64 = AtomicU64::new(0);

/// Number of times [`ce_loss`] / [`Objective::ce_on`] had to clamp a probability.
pub fn clamp_warnings() -> u64 {
    CLAMP_WARNINGS.load(Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoringMode {
    /// Average of per-attribute-slot softmaxes.
    Desc,
    /// One composite feature per class (the normalized mean of its rows).
    Plain,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoringConfig {
    pub tau: f64,
    pub alpha: f64,
    pub mode: ScoringMode,
}

impl ScoringConfig {
    pub fn new(tau: f64, alpha: f64) -> Result<Self> {
        let c = Self {
            tau,
            alpha,
            mode: ScoringMode::Desc,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            tau: 0.01,
            alpha: 10.0,
            mode: ScoringMode::Desc,
        }
    }
}

/// Text features of a candidate class list arranged by attribute slot:
/// `slots[j]` is K×d_t with row k = `T[k][j mod J_k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotBank<S> {
    slots: Vec<Tensor<S>>,
    classes: Vec<usize>,
}

impl<S: Scalar> SlotBank<S> {
    pub fn new(store: &TextEmbeddingStore<S>, classes: &[usize], mode: ScoringMode) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::invalid("scoring over an empty class set"));
        }
        for &k in classes {
            if k >= store.len() {
                return Err(Error::invalid(format!("class index {k} not in text store of {}", store.len())));
            }
        }
        let d = store.d_t();
        let slots = match mode {
            ScoringMode::Desc => {
                let width = classes.iter().map(|&k| store.class(k).num_attributes()).max().unwrap_or(1);
                (0..width)
                    .map(|j| {
                        let mut data = Vec::with_capacity(classes.len() * d);
                        for &k in classes {
                            let t = &store.class(k).texts;
                            data.extend_from_slice(t.row_slice(j % t.rows()));
                        }
                        Tensor::matrix(classes.len(), d, data)
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            ScoringMode::Plain => {
                let mut data = Vec::with_capacity(classes.len() * d);
                for &k in classes {
                    let t = &store.class(k).texts;
                    let mut mean = vec![S::zero(); d];
                    for r in 0..t.rows() {
                        for (m, &v) in mean.iter_mut().zip(t.row_slice(r)) {
                            *m += v;
                        }
                    }
                    let n = mean.iter().map(|&v| v * v).sum::<S>().sqrt();
                    data.extend(mean.into_iter().map(|v| if n > S::zero() { v / n } else { v }));
                }
                vec![Tensor::matrix(classes.len(), d, data)?]
            }
        };
        Ok(Self {
            slots,
            classes: classes.to_vec(),
        })
    }

    /// Global class ids in candidate order.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn slots(&self) -> &[Tensor<S>] {
        &self.slots
    }

    pub fn d_t(&self) -> usize {
        self.slots[0].cols()
    }

    pub fn register(&self, tape: &mut Tape<S>) -> Result<SlotVars> {
        Ok(SlotVars {
            slots: self
                .slots
                .iter()
                .map(|s| tape.constant(s.clone()))
                .collect::<Result<Vec<_>>>()?,
        })
    }
}

/// A [`SlotBank`] recorded on a tape.
#[derive(Clone, Debug)]
pub struct SlotVars {
    slots: Vec<Var>,
}

/// Objective terms on a tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub cfg: ScoringConfig,
}

impl Objective {
    pub fn new(cfg: ScoringConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    /// 1×K class probabilities for a 1×d_t feature.
    pub fn class_probs_on<S: Scalar>(&self, tape: &mut Tape<S>, v: Var, slots: &SlotVars) -> Result<Var> {
        let inv_tau = S::lit(1.0 / self.cfg.tau);
        let mut acc: Option<Var> = None;
        for &s in &slots.slots {
            let cos = tape.cosine_sim(v, s)?;
            let row = tape.transpose(cos)?;
            let logits = tape.scale(row, inv_tau)?;
            let p = tape.row_softmax(logits)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, p)?,
                None => p,
            });
        }
        let acc = acc.ok_or_else(|| Error::invalid("no scoring slots"))?;
        if slots.slots.len() == 1 {
            Ok(acc)
        } else {
            tape.scale(acc, S::lit(1.0 / slots.slots.len() as f64))
        }
    }

    /// `-log max(p[label], 1e-12)`.
    pub fn ce_on<S: Scalar>(&self, tape: &mut Tape<S>, probs: Var, label: usize) -> Result<Var> {
        let k = tape.value(probs).numel();
        if label >= k {
            return Err(Error::invalid(format!("label {label} out of range for {k} classes")));
        }
        let p = tape.select(probs, label)?;
        if tape.value(p).item().as_f64() < PROB_FLOOR {
            CLAMP_WARNINGS.fetch_add(1, Ordering::Relaxed);
        }
        let p = tape.clamp_min(p, S::lit(PROB_FLOOR))?;
        let l = tape.log(p)?;
        tape.neg(l)
    }

    /// `1 - cos(a, b)`.
    pub fn consistency_on<S: Scalar>(&self, tape: &mut Tape<S>, a: Var, b: Var) -> Result<Var> {
        let c = tape.cosine_sim(a, b)?;
        let n = tape.neg(c)?;
        tape.shift(n, S::one())
    }

    /// `ce + alpha * con`.
    pub fn total_on<S: Scalar>(&self, tape: &mut Tape<S>, ce: Var, con: Var) -> Result<Var> {
        let w = tape.scale(con, S::lit(self.cfg.alpha))?;
        tape.add(ce, w)
    }
}

/// Scalar loss terms of one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBundle {
    pub ce: f64,
    pub con: f64,
    pub total: f64,
    pub probs: Vec<f64>,
}

/// Attribute-averaged class probabilities for a unit feature vector.
pub fn class_probs<S: Scalar>(v: &Tensor<S>, bank: &SlotBank<S>, tau: f64) -> Result<Vec<S>> {
    let n = v.data().iter().map(|&x| x * x).sum::<S>().sqrt().as_f64();
    if (n - 1.0).abs() > 1e-4 {
        return Err(Error::invalid(format!("feature must be unit norm, got |v| = {n}")));
    }
    if v.numel() != bank.d_t() {
        return Err(Error::shape("class_probs", format!("feature {:?} vs d_t {}", v.shape(), bank.d_t())));
    }
    let obj = Objective::new(ScoringConfig { tau, alpha: 0.0, mode: ScoringMode::Desc })?;
    let mut tape = Tape::new();
    let vv = tape.constant(v.clone().reshape(vec![1, v.numel()])?)?;
    let slots = bank.register(&mut tape)?;
    let p = obj.class_probs_on(&mut tape, vv, &slots)?;
    Ok(tape.value(p).data().to_vec())
}

pub fn ce_loss<S: Scalar>(probs: &[S], label: usize) -> Result<f64> {
    let p = probs
        .get(label)
        .ok_or_else(|| Error::invalid(format!("label {label} out of range for {} classes", probs.len())))?
        .as_f64();
    if p < PROB_FLOOR {
        CLAMP_WARNINGS.fetch_add(1, Ordering::Relaxed);
    }
    Ok(-p.max(PROB_FLOOR).ln())
}

pub fn consistency_loss<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    if a.numel() != b.numel() {
        return Err(Error::shape("consistency_loss", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let obj = Objective::new(ScoringConfig::default())?;
    let mut tape = Tape::new();
    let x = tape.constant(a.clone().reshape(vec![1, a.numel()])?)?;
    let y = tape.constant(b.clone().reshape(vec![1, b.numel()])?)?;
    let c = obj.consistency_on(&mut tape, x, y)?;
    Ok(tape.value(c).item().as_f64())
}

pub fn total_loss(ce: f64, con: f64, alpha: f64) -> Result<f64> {
    if alpha < 0.0 {
        return Err(Error::invalid(format!("alpha must be >= 0, got {alpha}")));
    }
    Ok(ce + alpha * con)
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax<S: Scalar>(probs: &[S]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Candidate index predicted for a unit feature.
pub fn predict<S: Scalar>(v: &Tensor<S>, bank: &SlotBank<S>, tau: f64) -> Result<usize> {
    Ok(argmax(&class_probs(v, bank, tau)?))
}
