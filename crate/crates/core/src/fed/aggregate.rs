//! Server-side averaging of client payloads.
//!
//! Full-parameter payloads and adapter payloads are averaged in separate
//! buckets. Each coordinate is the correctly rounded mean of its inputs: the
//! sum is kept as an exact floating-point expansion and the quotient is
//! chosen among neighboring doubles by exact residual. The result therefore
//! does not depend on payload order, and identical inputs average to
//! themselves bit for bit.

use super::client::ClientPayload;
use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::promptformer::{LoraBank, PayloadKind};

/// Adds `x` to a nonoverlapping expansion kept in increasing magnitude.
fn grow(partials: &mut Vec<f64>, mut x: f64) {
    let mut kept = 0;
    for j in 0..partials.len() {
        let mut y = partials[j];
        if x.abs() < y.abs() {
            std::mem::swap(&mut x, &mut y);
        }
        let hi = x + y;
        let lo = y - (hi - x);
        if lo != 0.0 {
            partials[kept] = lo;
            kept += 1;
        }
        x = hi;
    }
    partials.truncate(kept);
    partials.push(x);
}

/// Sign of the exact value of an expansion: that of its largest nonzero term.
fn sign(partials: &[f64]) -> f64 {
    partials.iter().rev().find(|&&p| p != 0.0).map_or(0.0, |p| p.signum())
}

/// Exact `sum - c * n` as an expansion.
fn residual(sum: &[f64], c: f64, n: f64) -> Vec<f64> {
    let p = c * n;
    let e = c.mul_add(n, -p);
    let mut r = sum.to_vec();
    grow(&mut r, -p);
    grow(&mut r, -e);
    r
}

/// Exact sign of `|a| - |b|`.
fn compare_abs(a: &[f64], b: &[f64]) -> f64 {
    let (sa, sb) = (sign(a), sign(b));
    let mut d = Vec::with_capacity(a.len() + b.len());
    for &x in a {
        grow(&mut d, sa * x);
    }
    for &x in b {
        grow(&mut d, -sb * x);
    }
    sign(&d)
}

/// Mean of `values` rounded to the nearest double, ties to even.
pub fn exact_mean(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.iter().any(|v| !v.is_finite()) {
        return values.iter().sum::<f64>() / n;
    }
    // Power-of-two rescaling keeps partial sums finite near the top of the range.
    let big = values.iter().any(|v| v.abs() > 2f64.powi(1000));
    if big {
        let scaled: Vec<f64> = values.iter().map(|v| v * 2f64.powi(-64)).collect();
        return exact_mean(&scaled) * 2f64.powi(64);
    }
    let mut sum = Vec::new();
    for &v in values {
        grow(&mut sum, v);
    }
    let approx = sum.iter().sum::<f64>() / n;
    let mut candidates = vec![approx];
    let (mut lo, mut hi) = (approx, approx);
    for _ in 0..2 {
        lo = lo.next_down();
        hi = hi.next_up();
        candidates.push(lo);
        candidates.push(hi);
    }
    let mut best = approx;
    let mut best_r = residual(&sum, best, n);
    for &c in &candidates[1..] {
        if !c.is_finite() {
            continue;
        }
        let r = residual(&sum, c, n);
        let cmp = compare_abs(&r, &best_r);
        if cmp < 0.0 || (cmp == 0.0 && c.to_bits() & 1 == 0 && best.to_bits() & 1 == 1) {
            best = c;
            best_r = r;
        }
    }
    if best == 0.0 {
        // -0 only when every input is -0.
        return if values.iter().all(|v| v.to_bits() == (-0.0f64).to_bits()) { -0.0 } else { 0.0 };
    }
    best
}

/// Correctly rounded elementwise mean of equally long slices.
pub fn elementwise_mean<S: Scalar>(values: &[&[S]]) -> Vec<S> {
    let width = values[0].len();
    let mut column = Vec::with_capacity(values.len());
    (0..width)
        .map(|i| {
            column.clear();
            column.extend(values.iter().map(|v| v[i].as_f64()));
            S::lit(exact_mean(&column))
        })
        .collect()
}

/// Elementwise mean of named tensor lists that share names and shapes
/// with `reference`.
pub fn average_named<S: Scalar>(
    payloads: &[&[(String, Tensor<S>)]],
    reference: &[(String, &Tensor<S>)],
) -> Result<Vec<(String, Tensor<S>)>> {
    if payloads.is_empty() {
        return Err(Error::invalid("nothing to average"));
    }
    for p in payloads {
        if p.len() != reference.len() {
            return Err(Error::invalid(format!(
                "payload carries {} tensors, expected {}",
                p.len(),
                reference.len()
            )));
        }
        for ((name, t), (ref_name, r)) in p.iter().zip(reference) {
            if name != ref_name {
                return Err(Error::TensorMismatch {
                    name: name.clone(),
                    detail: format!("expected `{ref_name}` at this position"),
                });
            }
            if t.shape() != r.shape() {
                return Err(Error::TensorMismatch {
                    name: name.clone(),
                    detail: format!("shape {:?}, expected {:?}", t.shape(), r.shape()),
                });
            }
        }
    }
    reference
        .iter()
        .enumerate()
        .map(|(i, (name, r))| {
            let slices: Vec<&[S]> = payloads.iter().map(|p| p[i].1.data()).collect();
            Ok((name.clone(), Tensor::new(r.shape().to_vec(), elementwise_mean(&slices))?))
        })
        .collect()
}

/// Averages full payloads into the generator and adapter payloads into the
/// global bank. Payload order does not matter.
pub fn aggregate<S: Scalar>(state: &ModelState<S>, payloads: &[ClientPayload<S>]) -> Result<ModelState<S>> {
    if payloads.is_empty() {
        return Err(Error::invalid("aggregate called with no payloads"));
    }
    let mut sorted: Vec<&ClientPayload<S>> = payloads.iter().collect();
    sorted.sort_by_key(|p| p.client_id);
    if sorted.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::invalid("two payloads from the same client"));
    }
    let mut out = state.clone();

    let full: Vec<&[(String, Tensor<S>)]> = sorted
        .iter()
        .filter(|p| p.kind == PayloadKind::FullParams)
        .map(|p| p.tensors.as_slice())
        .collect();
    if !full.is_empty() {
        let avg = average_named(&full, &state.params.named())?;
        out.params.assign(&avg)?;
    }

    let lora: Vec<&[(String, Tensor<S>)]> = sorted
        .iter()
        .filter(|p| p.kind == PayloadKind::LoraOnly)
        .map(|p| p.tensors.as_slice())
        .collect();
    if !lora.is_empty() {
        let reference = match &state.lora {
            Some(bank) => bank.named().into_iter().map(|(n, t)| (n, t.clone())).collect::<Vec<_>>(),
            None => lora[0].to_vec(),
        };
        let reference: Vec<(String, &Tensor<S>)> = reference.iter().map(|(n, t)| (n.clone(), t)).collect();
        let avg = average_named(&lora, &reference)?;
        if let Some((_, down)) = avg.first() {
            if down.rows() != state.params.config().d_v {
                return Err(Error::TensorMismatch {
                    name: avg[0].0.clone(),
                    detail: format!("width {} vs d_v {}", down.rows(), state.params.config().d_v),
                });
            }
        }
        let scale = state.lora.as_ref().map(|b| b.scale()).unwrap_or(1.0);
        out.lora = Some(LoraBank::from_named(&avg, scale)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn means_are_exact() {
        assert_eq!(exact_mean(&[1.0, 2.0]), 1.5);
        assert_eq!(exact_mean(&[1.0, 2.0, 6.0]), 3.0);
        assert_eq!(exact_mean(&[0.1, 0.2, 0.3]), 0.2);
        assert_eq!(exact_mean(&[1e308, 1e308, -1e308]), 1e308 / 3.0);
        assert_eq!(exact_mean(&[1.0, 1e-30, -1.0]), 1e-30 / 3.0);
        assert_eq!(exact_mean(&[-0.0, -0.0]).to_bits(), (-0.0f64).to_bits());
        let x = [0.1f64, -7.3, 1e-300, 5e-324];
        for v in x {
            for n in 1..20 {
                assert_eq!(exact_mean(&vec![v; n]).to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn order_does_not_matter() {
        let v = [0.7, 1e16, -3.3, 1.0, -1e16, 2.0f64.powi(-60)];
        let mut w = v;
        w.reverse();
        assert_eq!(exact_mean(&v).to_bits(), exact_mean(&w).to_bits());
    }
}
