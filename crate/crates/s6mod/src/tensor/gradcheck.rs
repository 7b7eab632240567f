//! Finite-difference verification of reverse-mode gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Builds a scalar loss from leaves on a fresh tape. The checker calls
/// this many times with perturbed leaf values.
pub trait LossFn {
    fn build<'t>(&self, tape: &'t Tape, params: &[Var<'t>]) -> Result<Var<'t>>;
}

impl<F> LossFn for F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    fn build<'t>(&self, tape: &'t Tape, params: &[Var<'t>]) -> Result<Var<'t>> {
        self(tape, params)
    }
}

/// Identity helper that pins a closure to the [`LossFn`] signature so
/// type inference accepts it at call sites.
pub fn loss_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    f
}

/// Worst observed coordinate of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// max over coordinates of |analytic − central| / max(1e-8, |central|)
    pub max_rel_err: f64,
    /// (parameter index, flat coordinate) attaining the max
    pub worst: (usize, usize),
}

/// Checks the analytic gradient of `f` against central differences.
///
/// Every coordinate of every parameter is perturbed by ±`eps`; the
/// relative error is |analytic − central| / max(1e-8, |central|).
/// A non-finite loss at any probe point is reported as an error naming
/// the parameter and coordinate being perturbed.
pub fn finite_difference_check<F: LossFn + ?Sized>(
    f: &F,
    params: &[Tensor],
    eps: f64,
) -> Result<GradCheck> {
    let base: Vec<Vec<f64>> = params.iter().map(|p| p.data().to_vec()).collect();

    // analytic pass
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params
        .iter()
        .zip(base.iter())
        .map(|(p, v)| tape.variable(p.shape().to_vec(), v.clone()))
        .collect::<Result<_>>()?;
    let loss = f.build(&tape, &vars)?;
    if loss.numel() != 1 {
        return Err(Error::Contract("gradient check requires a scalar loss".into()));
    }
    if !loss.item().is_finite() {
        return Err(Error::Numeric("loss is non-finite at the probe point".into()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| vec![0.0; v.numel()]))
        .collect();
    drop(tape);

    let mut check = GradCheck { max_rel_err: 0.0, worst: (0, 0) };
    let mut probe = base.clone();
    for (pi, values) in base.iter().enumerate() {
        for ci in 0..values.len() {
            probe[pi][ci] = values[ci] + eps;
            let plus = loss_only(f, params, &probe)?;
            probe[pi][ci] = values[ci] - eps;
            let minus = loss_only(f, params, &probe)?;
            probe[pi][ci] = values[ci];
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss while perturbing parameter {pi} coordinate {ci}"
                )));
            }
            let central = (plus - minus) / (2.0 * eps);
            let rel = (analytic[pi][ci] - central).abs() / central.abs().max(1e-8);
            if rel > check.max_rel_err {
                check = GradCheck { max_rel_err: rel, worst: (pi, ci) };
            }
        }
    }
    Ok(check)
}

fn loss_only<F: LossFn + ?Sized>(f: &F, params: &[Tensor], values: &[Vec<f64>]) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params
        .iter()
        .zip(values.iter())
        .map(|(p, v)| tape.variable(p.shape().to_vec(), v.clone()))
        .collect::<Result<_>>()?;
    Ok(f.build(&tape, &vars)?.item())
}
