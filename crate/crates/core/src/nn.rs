//! Layer building blocks over the tape, shared by the frozen encoder and the
//! prompt generator.

use crate::autodiff::{Scalar, Tape, Var};
use crate::error::{Error, Result};

/// Projection weights of one attention block. Biases are optional.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bq: Option<Var>,
    pub bk: Option<Var>,
    pub bv: Option<Var>,
    pub bo: Option<Var>,
}

pub fn affine<S: Scalar>(tape: &mut Tape<S>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

/// Multi-head attention of `queries` (n×d) over `context` (k×d).
/// Heads split the model dimension evenly; scores are scaled by 1/sqrt(d_head).
pub fn multi_head_attention<S: Scalar>(
    tape: &mut Tape<S>,
    queries: Var,
    context: Var,
    w: &AttentionVars,
    heads: usize,
) -> Result<Var> {
    let d = tape.value(queries).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::shape("attention", format!("width {d} not divisible by {heads} heads")));
    }
    let q = affine(tape, queries, w.wq, w.bq)?;
    let k = affine(tape, context, w.wk, w.bk)?;
    let v = affine(tape, context, w.wv, w.bv)?;
    let dh = d / heads;
    let scale = S::lit(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.row_softmax(scores)?;
        outs.push(tape.matmul(attn, vh)?);
    }
    let merged = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    affine(tape, merged, w.wo, w.bo)
}

/// Two-layer feed-forward: `Linear -> GeLU -> Linear`.
pub fn feed_forward<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
) -> Result<Var> {
    let h = tape.linear(x, w1, b1)?;
    let h = tape.gelu(h)?;
    tape.linear(h, w2, b2)
}
