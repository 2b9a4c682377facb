//! Central finite-difference gradient checking.

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) of the worst coordinate
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

fn eval<S, F>(f: &F, params: &[Tensor<S>]) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::shape("finite_difference_check", format!("fn returned {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Gradients of `f` at `params` by reverse mode.
pub fn analytic_gradients<S, F>(f: &F, params: &[Tensor<S>]) -> Result<Vec<Tensor<S>>>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars.iter().map(|&v| grads.wrt(&tape, v)).collect())
}

/// Compares `analytic` against central differences of `f` with the given step.
pub fn compare_with_numeric<S, F>(
    f: &F,
    params: &[Tensor<S>],
    analytic: &[Tensor<S>],
    step: f64,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::invalid(format!("step must be positive, got {step}")));
    }
    if analytic.len() != params.len() {
        return Err(Error::invalid("one analytic gradient per parameter required"));
    }
    let base = eval(f, params)?;
    let again = eval(f, params)?;
    if base.bits() != again.bits() {
        return Err(Error::NonDeterministic(format!("{base} vs {again} on identical input")));
    }

    let h = S::lit(step);
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for pi in 0..params.len() {
        for ci in 0..params[pi].numel() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + h;
            let plus = eval(f, &work)?;
            work[pi].data_mut()[ci] = orig - h;
            let minus = eval(f, &work)?;
            work[pi].data_mut()[ci] = orig;

            let numeric = (plus.as_f64() - minus.as_f64()) / (2.0 * step);
            let a = analytic[pi].data()[ci].as_f64();
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pi, ci));
            }
        }
    }
    Ok(report)
}

/// Analytic-vs-central-difference check of a scalar function built on a tape.
/// `f` receives one trainable leaf per entry of `params`.
pub fn finite_difference_check<S, F>(f: F, params: &[Tensor<S>], step: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, params)?;
    compare_with_numeric(&f, params, &analytic, step)
}
