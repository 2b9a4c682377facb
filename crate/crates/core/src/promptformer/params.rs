use crate::autodiff::{checksum_all, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng;

/// Std of the query bank and of every linear weight at initialization.
pub const INIT_STD: f64 = 0.02;

/// Number of cross-attention stages (and feed-forward stages).
pub const STAGES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PromptFormerConfig {
    /// Number of generated prompts.
    pub m: usize,
    pub d_v: usize,
    pub d_t: usize,
    pub heads: usize,
    /// Bottleneck width of each feed-forward stage.
    pub d_ff: usize,
}

impl PromptFormerConfig {
    /// Default bottleneck is half the model width.
    pub fn new(m: usize, d_v: usize, d_t: usize, heads: usize) -> Self {
        Self {
            m,
            d_v,
            d_t,
            heads,
            d_ff: (d_v / 2).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.d_v == 0 || self.d_t == 0 || self.d_ff == 0 {
            return Err(Error::invalid(format!("prompt generator dims must be positive: {self:?}")));
        }
        if self.heads == 0 || !self.d_v.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "d_v = {} is not divisible by heads = {}",
                self.d_v, self.heads
            )));
        }
        Ok(())
    }

    /// Scalars in the full parameter set.
    pub fn full_count(&self) -> usize {
        let (m, d, t, f) = (self.m, self.d_v, self.d_t, self.d_ff);
        let attn = 4 * d * d + 2 * d;
        let ffn = d * f + f + f * d + d;
        m * d + t * d + d + STAGES * (attn + ffn)
    }

    /// Scalars in a LoRA bank of the given rank: six projections, two factors each.
    pub fn lora_count(&self, rank: usize) -> usize {
        6 * 2 * self.d_v * rank
    }
}

/// Weights of one cross-attention + feed-forward stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageParams<S> {
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    pub wo: Tensor<S>,
    pub ln_gamma: Tensor<S>,
    pub ln_beta: Tensor<S>,
    pub ffn_w1: Tensor<S>,
    pub ffn_b1: Tensor<S>,
    pub ffn_w2: Tensor<S>,
    pub ffn_b2: Tensor<S>,
}

const STAGE_FIELDS: [&str; 10] = [
    "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln.gamma", "ln.beta", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
];

impl<S: Scalar> StageParams<S> {
    fn init(c: &PromptFormerConfig, r: &mut rng::Rng) -> Self {
        let d = c.d_v;
        Self {
            wq: Tensor::randn(&[d, d], INIT_STD, r),
            wk: Tensor::randn(&[d, d], INIT_STD, r),
            wv: Tensor::randn(&[d, d], INIT_STD, r),
            wo: Tensor::randn(&[d, d], INIT_STD, r),
            ln_gamma: Tensor::full(&[1, d], S::one()),
            ln_beta: Tensor::zeros(&[1, d]),
            ffn_w1: Tensor::randn(&[d, c.d_ff], INIT_STD, r),
            ffn_b1: Tensor::zeros(&[1, c.d_ff]),
            ffn_w2: Tensor::randn(&[c.d_ff, d], INIT_STD, r),
            ffn_b2: Tensor::zeros(&[1, d]),
        }
    }

    fn tensors(&self) -> [&Tensor<S>; 10] {
        [
            &self.wq, &self.wk, &self.wv, &self.wo, &self.ln_gamma, &self.ln_beta, &self.ffn_w1, &self.ffn_b1,
            &self.ffn_w2, &self.ffn_b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<S>; 10] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln_gamma,
            &mut self.ln_beta,
            &mut self.ffn_w1,
            &mut self.ffn_b1,
            &mut self.ffn_w2,
            &mut self.ffn_b2,
        ]
    }
}

/// Every trainable weight of the prompt generator; the only model state a
/// client ever transmits in full mode.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptFormerParams<S> {
    config: PromptFormerConfig,
    /// m×d_v learnable query prompts
    pub query_bank: Tensor<S>,
    /// d_t×d_v attribute projection
    pub t_proj_w: Tensor<S>,
    pub t_proj_b: Tensor<S>,
    pub stages: [StageParams<S>; STAGES],
}

impl<S: Scalar> PromptFormerParams<S> {
    pub fn init(config: PromptFormerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::child_rng(seed, "promptformer", &[]);
        let query_bank = Tensor::randn(&[config.m, config.d_v], INIT_STD, &mut r);
        let t_proj_w = Tensor::randn(&[config.d_t, config.d_v], INIT_STD, &mut r);
        let stages = [StageParams::init(&config, &mut r), StageParams::init(&config, &mut r)];
        Ok(Self {
            config,
            query_bank,
            t_proj_w,
            t_proj_b: Tensor::zeros(&[1, config.d_v]),
            stages,
        })
    }

    pub fn config(&self) -> &PromptFormerConfig {
        &self.config
    }

    /// Tensor names in the order of [`Self::tensors`].
    pub fn names() -> Vec<String> {
        let mut out = vec!["query_bank".to_string(), "t_proj.weight".into(), "t_proj.bias".into()];
        for s in 0..STAGES {
            out.extend(STAGE_FIELDS.iter().map(|f| format!("stage{}.{f}", s + 1)));
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        let mut out = vec![&self.query_bank, &self.t_proj_w, &self.t_proj_b];
        for s in &self.stages {
            out.extend(s.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = vec![&mut self.query_bank, &mut self.t_proj_w, &mut self.t_proj_b];
        for s in &mut self.stages {
            out.extend(s.tensors_mut());
        }
        out
    }

    pub fn named(&self) -> Vec<(String, &Tensor<S>)> {
        Self::names().into_iter().zip(self.tensors()).collect()
    }

    /// Replaces every tensor from a name-ordered list, checking shapes.
    pub fn assign(&mut self, values: &[(String, Tensor<S>)]) -> Result<()> {
        let names = Self::names();
        if values.len() != names.len() {
            return Err(Error::invalid(format!(
                "expected {} prompt generator tensors, got {}",
                names.len(),
                values.len()
            )));
        }
        for ((name, slot), (got_name, v)) in names.iter().zip(self.tensors_mut()).zip(values) {
            if name != got_name {
                return Err(Error::TensorMismatch {
                    name: got_name.clone(),
                    detail: format!("expected `{name}` at this position"),
                });
            }
            if slot.shape() != v.shape() {
                return Err(Error::TensorMismatch {
                    name: name.clone(),
                    detail: format!("shape {:?}, expected {:?}", v.shape(), slot.shape()),
                });
            }
            *slot = v.clone();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn checksum(&self) -> u64 {
        checksum_all(self.tensors())
    }

    pub fn cast<T: Scalar>(&self) -> PromptFormerParams<T> {
        let mut out = PromptFormerParams::<T>::init(self.config, 0).expect("validated config");
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }
}

/// Which weights a payload carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PayloadKind {
    FullParams,
    LoraOnly,
}

impl PayloadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PayloadKind::FullParams => "full_params",
            PayloadKind::LoraOnly => "lora_only",
        }
    }
}

/// Low-rank adapters on the query, key and value projections of both stages.
/// The effective weight is `W + scale * down * up`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraBank<S> {
    rank: usize,
    scale: f64,
    d_v: usize,
    /// (down d_v×r, up r×d_v) for stage1 q,k,v then stage2 q,k,v
    pub pairs: Vec<(Tensor<S>, Tensor<S>)>,
}

pub const LORA_TARGETS: [&str; 3] = ["q", "k", "v"];

impl<S: Scalar> LoraBank<S> {
    /// Fresh bank: `down ~ N(0, 0.02²)`, `up = 0`, scale 1, so the adapted
    /// generator starts out identical to the base.
    pub fn inject(params: &PromptFormerParams<S>, rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::invalid("LoRA rank must be >= 1"));
        }
        let d = params.config().d_v;
        let mut r = rng::child_rng(seed, "lora", &[]);
        let pairs = (0..STAGES * LORA_TARGETS.len())
            .map(|_| (Tensor::randn(&[d, rank], INIT_STD, &mut r), Tensor::zeros(&[rank, d])))
            .collect();
        Ok(Self {
            rank,
            scale: 1.0,
            d_v: d,
            pairs,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn d_v(&self) -> usize {
        self.d_v
    }

    pub fn names() -> Vec<String> {
        let mut out = Vec::new();
        for s in 0..STAGES {
            for t in LORA_TARGETS {
                out.push(format!("lora.stage{}.{t}.down", s + 1));
                out.push(format!("lora.stage{}.{t}.up", s + 1));
            }
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        self.pairs.iter().flat_map(|(d, u)| [d, u]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.pairs.iter_mut().flat_map(|(d, u)| [d, u]).collect()
    }

    pub fn named(&self) -> Vec<(String, &Tensor<S>)> {
        Self::names().into_iter().zip(self.tensors()).collect()
    }

    /// Rebuilds a bank from a name-ordered tensor list.
    pub fn from_named(values: &[(String, Tensor<S>)], scale: f64) -> Result<Self> {
        let names = Self::names();
        if values.len() != names.len() {
            return Err(Error::invalid(format!("expected {} LoRA tensors, got {}", names.len(), values.len())));
        }
        for (n, (got, _)) in names.iter().zip(values) {
            if n != got {
                return Err(Error::TensorMismatch {
                    name: got.clone(),
                    detail: format!("expected `{n}` at this position"),
                });
            }
        }
        let (d_v, rank) = values[0].1.dims2();
        let mut pairs = Vec::with_capacity(names.len() / 2);
        for chunk in values.chunks(2) {
            let (down, up) = (&chunk[0].1, &chunk[1].1);
            if down.dims2() != (d_v, rank) || up.dims2() != (rank, d_v) {
                return Err(Error::TensorMismatch {
                    name: chunk[0].0.clone(),
                    detail: format!("factor shapes {:?} / {:?}", down.shape(), up.shape()),
                });
            }
            pairs.push((down.clone(), up.clone()));
        }
        Ok(Self { rank, scale, d_v, pairs })
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn checksum(&self) -> u64 {
        checksum_all(self.tensors())
    }
}

/// Exact number of scalars the given payload kind transmits.
pub fn param_count<S: Scalar>(params: &PromptFormerParams<S>, kind: PayloadKind, lora: Option<&LoraBank<S>>) -> Result<usize> {
    match kind {
        PayloadKind::FullParams => Ok(params.tensors().iter().map(|t| t.numel()).sum()),
        PayloadKind::LoraOnly => lora
            .map(|b| b.count())
            .ok_or_else(|| Error::invalid("lora_only count requested without a LoRA bank")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_shapes() {
        let c = PromptFormerConfig::new(4, 768, 512, 4);
        let p = PromptFormerParams::<f32>::init(c, 0).unwrap();
        assert_eq!(p.query_bank.shape(), &[4, 768]);
        assert_eq!(p.t_proj_w.shape(), &[512, 768]);
        assert_eq!(p.stages[1].ffn_w1.shape(), &[768, 384]);
        let bank = LoraBank::inject(&p, 4, 1).unwrap();
        assert_eq!(bank.count(), 36_864);
    }

    #[test]
    fn toy_counts_match_hand_tally() {
        // d_v=32, d_t=16, m=2, d_ff=16, r=2
        // query 64 + t_proj 512 + 32
        // per stage: 4*1024 + 2*32 = 4160 attention; 512+16+512+32 = 1072 ffn
        let c = PromptFormerConfig {
            m: 2,
            d_v: 32,
            d_t: 16,
            heads: 4,
            d_ff: 16,
        };
        let p = PromptFormerParams::<f64>::init(c, 0).unwrap();
        let full = param_count(&p, PayloadKind::FullParams, None).unwrap();
        assert_eq!(full, 64 + 512 + 32 + 2 * (4160 + 1072));
        assert_eq!(full, c.full_count());
        let bank = LoraBank::inject(&p, 2, 0).unwrap();
        assert_eq!(param_count(&p, PayloadKind::LoraOnly, Some(&bank)).unwrap(), 768);
        assert_eq!(c.lora_count(2), 12 * 32 * 2);
        assert!(param_count(&p, PayloadKind::LoraOnly, None).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let c = PromptFormerConfig::new(2, 8, 4, 2);
        let a = PromptFormerParams::<f64>::init(c, 5).unwrap();
        assert_eq!(a.checksum(), PromptFormerParams::<f64>::init(c, 5).unwrap().checksum());
        assert_ne!(a.checksum(), PromptFormerParams::<f64>::init(c, 6).unwrap().checksum());
        assert!(PromptFormerParams::<f64>::init(PromptFormerConfig::new(2, 9, 4, 2), 0).is_err());
        assert_eq!(a.stages[0].ln_gamma.data(), &[1.0; 8]);
        assert_eq!(a.t_proj_b.data(), &[0.0; 8]);
    }

    #[test]
    fn names_align_with_tensors() {
        let c = PromptFormerConfig::new(2, 8, 4, 2);
        let p = PromptFormerParams::<f64>::init(c, 5).unwrap();
        assert_eq!(PromptFormerParams::<f64>::names().len(), p.tensors().len());
        let named: Vec<(String, Tensor<f64>)> = p.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let mut q = PromptFormerParams::<f64>::init(c, 9).unwrap();
        q.assign(&named).unwrap();
        assert_eq!(p, q);
        let mut bad = named.clone();
        bad[1].1 = Tensor::zeros(&[3, 3]);
        assert!(matches!(q.assign(&bad), Err(Error::TensorMismatch { .. })));
    }

    #[test]
    fn lora_names_round_trip() {
        let p = PromptFormerParams::<f64>::init(PromptFormerConfig::new(2, 8, 4, 2), 0).unwrap();
        let bank = LoraBank::inject(&p, 3, 1).unwrap();
        let named: Vec<(String, Tensor<f64>)> = bank.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        assert_eq!(LoraBank::from_named(&named, 1.0).unwrap(), bank);
        assert!(LoraBank::<f64>::inject(&p, 0, 0).is_err());
    }
}
