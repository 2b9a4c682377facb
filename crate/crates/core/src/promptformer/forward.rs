//! Prompt generation.
//!
//! Stage 1: the learnable query bank attends to the image's patch embeddings.
//! Stage 2: the result attends to the projected attribute embeddings of the
//! client's class set. Each stage is multi-head cross-attention with an output
//! projection, a residual connection and layer norm, followed by a bottleneck
//! feed-forward block with its own residual.

use super::params::{LoraBank, PromptFormerParams, STAGES};
use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{self, AttentionVars};

#[derive(Clone, Debug)]
struct StageGraph {
    attn: AttentionVars,
    ln_gamma: Var,
    ln_beta: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// The generator's weights recorded on a tape, with LoRA already folded into
/// the attention projections. Build once per tape and reuse across samples.
#[derive(Clone, Debug)]
pub struct PromptFormerGraph {
    /// Leaves for the base parameters, in [`PromptFormerParams::tensors`] order.
    pub base_vars: Vec<Var>,
    /// Leaves for the LoRA factors, in [`LoraBank::tensors`] order.
    pub lora_vars: Option<Vec<Var>>,
    query_bank: Var,
    t_proj_w: Var,
    t_proj_b: Var,
    stages: Vec<StageGraph>,
    heads: usize,
    d_v: usize,
    d_t: usize,
}

impl PromptFormerGraph {
    pub fn build<S: Scalar>(
        tape: &mut Tape<S>,
        params: &PromptFormerParams<S>,
        base_trainable: bool,
        lora: Option<(&LoraBank<S>, bool)>,
    ) -> Result<Self> {
        let cfg = *params.config();
        let base_vars = params
            .tensors()
            .into_iter()
            .map(|t| tape.leaf(t.clone(), base_trainable))
            .collect::<Result<Vec<_>>>()?;
        let lora_vars = match lora {
            Some((bank, trainable)) => {
                if bank.d_v() != cfg.d_v {
                    return Err(Error::shape("lora", format!("bank width {} vs d_v {}", bank.d_v(), cfg.d_v)));
                }
                Some(
                    bank.tensors()
                        .into_iter()
                        .map(|t| tape.leaf(t.clone(), trainable))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            None => None,
        };
        let scale = lora.map(|(b, _)| b.scale()).unwrap_or(1.0);

        // base_vars layout: query_bank, t_proj.w, t_proj.b, then 10 per stage
        let mut stages = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let v = &base_vars[3 + 10 * s..3 + 10 * (s + 1)];
            let mut qkv = [v[0], v[1], v[2]];
            if let Some(lv) = &lora_vars {
                for (t, w) in qkv.iter_mut().enumerate() {
                    let pair = 2 * (3 * s + t);
                    let delta = tape.matmul(lv[pair], lv[pair + 1])?;
                    let delta = if scale == 1.0 { delta } else { tape.scale(delta, S::lit(scale))? };
                    *w = tape.add(*w, delta)?;
                }
            }
            stages.push(StageGraph {
                attn: AttentionVars {
                    wq: qkv[0],
                    wk: qkv[1],
                    wv: qkv[2],
                    wo: v[3],
                    bq: None,
                    bk: None,
                    bv: None,
                    bo: None,
                },
                ln_gamma: v[4],
                ln_beta: v[5],
                w1: v[6],
                b1: v[7],
                w2: v[8],
                b2: v[9],
            });
        }
        Ok(Self {
            query_bank: base_vars[0],
            t_proj_w: base_vars[1],
            t_proj_b: base_vars[2],
            base_vars,
            lora_vars,
            stages,
            heads: cfg.heads,
            d_v: cfg.d_v,
            d_t: cfg.d_t,
        })
    }

    /// `A' = A · T_proj + b`, mapping J×d_t attribute embeddings to J×d_v.
    pub fn project_attributes<S: Scalar>(&self, tape: &mut Tape<S>, attributes: Var) -> Result<Var> {
        let (rows, cols) = tape.value(attributes).dims2();
        if rows == 0 || cols != self.d_t {
            return Err(Error::shape(
                "project_attributes",
                format!("attributes {rows}x{cols}, expected Jx{}", self.d_t),
            ));
        }
        tape.linear(attributes, self.t_proj_w, self.t_proj_b)
    }

    fn stage<S: Scalar>(&self, tape: &mut Tape<S>, s: usize, queries: Var, context: Var) -> Result<Var> {
        let st = &self.stages[s];
        let a = nn::multi_head_attention(tape, queries, context, &st.attn, self.heads)?;
        let x = tape.add(queries, a)?;
        let x = tape.layer_norm(x, st.ln_gamma, st.ln_beta)?;
        let f = nn::feed_forward(tape, x, st.w1, st.b1, st.w2, st.b2)?;
        tape.add(x, f)
    }

    /// m×d_v prompts from projected attributes (J×d_v) and patch embeddings (b×d_v).
    pub fn prompts<S: Scalar>(&self, tape: &mut Tape<S>, projected_attributes: Var, patches: Var) -> Result<Var> {
        for (name, v) in [("patches", patches), ("projected attributes", projected_attributes)] {
            if tape.value(v).cols() != self.d_v {
                return Err(Error::shape(
                    "generate_prompts",
                    format!("{name} width {} vs d_v {}", tape.value(v).cols(), self.d_v),
                ));
            }
        }
        let x = self.stage(tape, 0, self.query_bank, patches)?;
        self.stage(tape, 1, x, projected_attributes)
    }

    /// Projection and prompt generation in one call.
    pub fn generate<S: Scalar>(&self, tape: &mut Tape<S>, attributes: Var, patches: Var) -> Result<Var> {
        let a = self.project_attributes(tape, attributes)?;
        self.prompts(tape, a, patches)
    }
}

/// Forward-only attribute projection.
pub fn project_attributes<S: Scalar>(params: &PromptFormerParams<S>, attributes: &Tensor<S>) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let g = PromptFormerGraph::build(&mut tape, params, false, None)?;
    let a = tape.constant(attributes.clone())?;
    let out = g.project_attributes(&mut tape, a)?;
    Ok(tape.value(out).clone())
}

/// Forward-only prompt generation.
pub fn generate_prompts<S: Scalar>(
    params: &PromptFormerParams<S>,
    lora: Option<&LoraBank<S>>,
    attributes: &Tensor<S>,
    patches: &Tensor<S>,
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let g = PromptFormerGraph::build(&mut tape, params, false, lora.map(|b| (b, false)))?;
    let a = tape.constant(attributes.clone())?;
    let e = tape.constant(patches.clone())?;
    let p = g.generate(&mut tape, a, e)?;
    Ok(tape.value(p).clone())
}

#[cfg(test)]
mod tests {
    use super::super::params::PromptFormerConfig;
    use super::*;
    use crate::rng;

    fn setup(m: usize) -> (PromptFormerParams<f64>, Tensor<f64>, Tensor<f64>) {
        let p = PromptFormerParams::init(PromptFormerConfig::new(m, 8, 6, 2), 1).unwrap();
        let mut r = rng::rng(2);
        (p, Tensor::randn(&[3, 6], 1.0, &mut r), Tensor::randn(&[4, 8], 1.0, &mut r))
    }

    #[test]
    fn output_has_m_rows() {
        for m in [1, 2, 4] {
            let (p, a, e) = setup(m);
            let out = generate_prompts(&p, None, &a, &e).unwrap();
            assert_eq!(out.shape(), &[m, 8]);
            assert!(out.is_finite());
        }
    }

    #[test]
    fn width_mismatches_rejected() {
        let (p, a, _) = setup(2);
        assert!(generate_prompts(&p, None, &a, &Tensor::zeros(&[4, 7])).is_err());
        assert!(generate_prompts(&p, None, &Tensor::zeros(&[2, 5]), &Tensor::zeros(&[4, 8])).is_err());
    }

    #[test]
    fn identity_projection() {
        let mut p = PromptFormerParams::<f64>::init(PromptFormerConfig::new(2, 4, 4, 2), 0).unwrap();
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        p.t_proj_w = Tensor::matrix(4, 4, eye).unwrap();
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng::rng(0));
        assert_eq!(project_attributes(&p, &a).unwrap(), a);
    }

    #[test]
    fn zero_attributes_give_bias() {
        let (mut p, _, _) = setup(2);
        p.t_proj_b = Tensor::row((0..8).map(|i| i as f64).collect()).unwrap();
        let out = project_attributes(&p, &Tensor::zeros(&[3, 6])).unwrap();
        for r in 0..3 {
            assert_eq!(out.row_slice(r), p.t_proj_b.data());
        }
    }

    #[test]
    fn fresh_lora_is_bitwise_neutral() {
        let (p, a, e) = setup(3);
        let bank = LoraBank::inject(&p, 2, 7).unwrap();
        assert_eq!(
            generate_prompts(&p, Some(&bank), &a, &e).unwrap(),
            generate_prompts(&p, None, &a, &e).unwrap()
        );
    }

    #[test]
    fn trained_lora_changes_output() {
        let (p, a, e) = setup(3);
        let mut bank = LoraBank::inject(&p, 2, 7).unwrap();
        bank.pairs[3].1 = Tensor::full(&[2, 8], 0.5);
        assert_ne!(
            generate_prompts(&p, Some(&bank), &a, &e).unwrap(),
            generate_prompts(&p, None, &a, &e).unwrap()
        );
    }

    #[test]
    fn attention_over_identical_keys_returns_their_value() {
        let (p, _, _) = setup(3);
        let row = Tensor::randn(&[1, 8], 1.0, &mut rng::rng(4));
        let context: Vec<f64> = row.data().iter().cycle().take(5 * 8).copied().collect();
        let st = &p.stages[1];
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::randn(&[3, 8], 1.0, &mut rng::rng(5))).unwrap();
        let ctx = tape.constant(Tensor::matrix(5, 8, context).unwrap()).unwrap();
        let w = AttentionVars {
            wq: tape.constant(st.wq.clone()).unwrap(),
            wk: tape.constant(st.wk.clone()).unwrap(),
            wv: tape.constant(st.wv.clone()).unwrap(),
            wo: tape.constant(st.wo.clone()).unwrap(),
            bq: None,
            bk: None,
            bv: None,
            bo: None,
        };
        let out = nn::multi_head_attention(&mut tape, q, ctx, &w, 2).unwrap();
        let single = tape.constant(row).unwrap();
        let v = tape.matmul(single, w.wv).unwrap();
        let expect = tape.matmul(v, w.wo).unwrap();
        for r in 0..3 {
            for (x, y) in tape.value(out).row_slice(r).iter().zip(tape.value(expect).data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attribute_row_order_does_not_matter() {
        let (p, a, e) = setup(2);
        let mut rows: Vec<Vec<f64>> = (0..3).map(|r| a.row_slice(r).to_vec()).collect();
        rows.rotate_left(1);
        let permuted = Tensor::matrix(3, 6, rows.concat()).unwrap();
        let x = generate_prompts(&p, None, &a, &e).unwrap();
        let y = generate_prompts(&p, None, &permuted, &e).unwrap();
        for (u, v) in x.data().iter().zip(y.data()) {
            assert!((u - v).abs() < 1e-6);
        }
    }
}
