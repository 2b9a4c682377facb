//! The full classifier: frozen encoders, the prompt generator and attribute
//! scoring, recorded together on one tape.

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::encoders::{FrozenVit, PatchPack, TextEmbeddingStore, VitHandles};
use crate::error::{Error, Result};
use crate::objective::{argmax, Objective, ScoringMode, SlotBank, SlotVars};
use crate::promptformer::{LoraBank, PromptFormerGraph, PromptFormerParams};

/// The frozen half of the model, shared read-only by every client.
#[derive(Clone, Debug)]
pub struct FrozenBundle<S> {
    pub vit: FrozenVit<S>,
    pub text: TextEmbeddingStore<S>,
}

impl<S: Scalar> FrozenBundle<S> {
    /// `(vision checksum, text checksum)`.
    pub fn checksums(&self) -> (u64, u64) {
        (self.vit.checksum(), self.text.checksum())
    }
}

/// Everything the server broadcasts: the generator and the optional global
/// adapter bank.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<S> {
    pub params: PromptFormerParams<S>,
    pub lora: Option<LoraBank<S>>,
}

impl<S: Scalar> ModelState<S> {
    pub fn is_finite(&self) -> bool {
        self.params.is_finite() && self.lora.as_ref().is_none_or(|l| l.tensors().iter().all(|t| t.is_finite()))
    }
}

/// A candidate class set: the attribute matrix the generator is conditioned
/// on and the text features the classifier scores against.
#[derive(Clone, Debug)]
pub struct ClassView<S> {
    attributes: Tensor<S>,
    bank: SlotBank<S>,
}

impl<S: Scalar> ClassView<S> {
    pub fn new(text: &TextEmbeddingStore<S>, classes: &[usize], mode: ScoringMode) -> Result<Self> {
        Ok(Self {
            attributes: text.attribute_matrix(classes)?,
            bank: SlotBank::new(text, classes, mode)?,
        })
    }

    /// Global class ids in candidate order.
    pub fn classes(&self) -> &[usize] {
        self.bank.classes()
    }

    /// Candidate position of a global class id.
    pub fn position(&self, class: usize) -> Option<usize> {
        self.classes().iter().position(|&c| c == class)
    }

    pub fn attributes(&self) -> &Tensor<S> {
        &self.attributes
    }

    pub fn bank(&self) -> &SlotBank<S> {
        &self.bank
    }
}

/// Which parameter group receives gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Base,
    Lora,
}

/// Tape-recorded terms for one sample.
#[derive(Clone, Copy, Debug)]
pub struct SampleTerms {
    pub probs: Var,
    pub ce: Var,
    pub con: Var,
    pub total: Var,
}

/// The model recorded on a tape for one class view.
pub struct ModelTape<'a, S: Scalar> {
    pub tape: Tape<S>,
    pub graph: PromptFormerGraph,
    vit: &'a FrozenVit<S>,
    handles: VitHandles,
    attributes: Var,
    slots: SlotVars,
    objective: Objective,
}

impl<'a, S: Scalar> ModelTape<'a, S> {
    pub fn new(
        bundle: &'a FrozenBundle<S>,
        state: &ModelState<S>,
        view: &ClassView<S>,
        objective: Objective,
        trainable: Trainable,
    ) -> Result<Self> {
        if trainable == Trainable::Lora && state.lora.is_none() {
            return Err(Error::invalid("adapter training requested without an adapter bank"));
        }
        let mut tape = Tape::new();
        let handles = bundle.vit.register(&mut tape)?;
        let graph = PromptFormerGraph::build(
            &mut tape,
            &state.params,
            trainable == Trainable::Base,
            state.lora.as_ref().map(|l| (l, trainable == Trainable::Lora)),
        )?;
        let a = tape.constant(view.attributes.clone())?;
        let attributes = graph.project_attributes(&mut tape, a)?;
        let slots = view.bank.register(&mut tape)?;
        Ok(Self {
            tape,
            graph,
            vit: &bundle.vit,
            handles,
            attributes,
            slots,
            objective,
        })
    }

    /// Leaves of the group being trained, in the group's tensor order.
    pub fn trainable_vars(&self, trainable: Trainable) -> Vec<Var> {
        match trainable {
            Trainable::Nothing => Vec::new(),
            Trainable::Base => self.graph.base_vars.clone(),
            Trainable::Lora => self.graph.lora_vars.clone().unwrap_or_default(),
        }
    }

    /// Prompted, unit-normalized image feature.
    pub fn feature(&mut self, pack: &PatchPack<S>) -> Result<Var> {
        let cls = self.tape.constant(pack.cls.clone())?;
        let patches = self.tape.constant(pack.patches.clone())?;
        let prompts = self.graph.prompts(&mut self.tape, self.attributes, patches)?;
        self.vit.encode(&mut self.tape, &self.handles, cls, patches, Some(prompts))
    }

    /// Unprompted feature, the consistency target.
    pub fn plain_feature(&mut self, pack: &PatchPack<S>) -> Result<Var> {
        let cls = self.tape.constant(pack.cls.clone())?;
        let patches = self.tape.constant(pack.patches.clone())?;
        self.vit.encode(&mut self.tape, &self.handles, cls, patches, None)
    }

    pub fn probs(&mut self, feature: Var) -> Result<Var> {
        self.objective.class_probs_on(&mut self.tape, feature, &self.slots)
    }

    /// Loss terms for one sample. `target` is the candidate position of the
    /// label, `augmented` the pack of the augmented view.
    pub fn sample_terms(&mut self, pack: &PatchPack<S>, target: usize, augmented: &PatchPack<S>) -> Result<SampleTerms> {
        let v = self.feature(pack)?;
        let probs = self.probs(v)?;
        let ce = self.objective.ce_on(&mut self.tape, probs, target)?;
        let plain = self.plain_feature(augmented)?;
        let con = self.objective.consistency_on(&mut self.tape, v, plain)?;
        let total = self.objective.total_on(&mut self.tape, ce, con)?;
        Ok(SampleTerms { probs, ce, con, total })
    }

    /// Candidate position with the highest probability.
    pub fn predict(&mut self, pack: &PatchPack<S>) -> Result<usize> {
        let v = self.feature(pack)?;
        let p = self.probs(v)?;
        Ok(argmax(self.tape.value(p).data()))
    }
}

/// Samples per tape when only predicting, bounding tape memory.
const PREDICT_CHUNK: usize = 64;

/// Global class id predicted for every pack, choosing among `view`'s classes.
pub fn predict_packs<S: Scalar>(
    bundle: &FrozenBundle<S>,
    state: &ModelState<S>,
    view: &ClassView<S>,
    objective: Objective,
    packs: &[&PatchPack<S>],
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(packs.len());
    for chunk in packs.chunks(PREDICT_CHUNK) {
        let mut mt = ModelTape::new(bundle, state, view, objective, Trainable::Nothing)?;
        for pack in chunk {
            out.push(view.classes()[mt.predict(pack)?]);
        }
    }
    Ok(out)
}
