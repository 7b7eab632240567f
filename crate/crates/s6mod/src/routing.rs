//! Mixture-of-discretization expert bank with sparse gating, class
//! prototypes with EMA updates, and uncertainty-driven expert counts.
//!
//! Gating granularity: one routing decision per sample, computed on the
//! spatially mean-pooled branch input. Candidate Δs stay per-token.
//! The discrete top-k selection is piecewise-constant — no gradient
//! flows through the index set, only through the selected weights and
//! candidates.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{BoundParams, Linear, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Bank of Δ-candidate projections plus the gate that scores them.
#[derive(Debug)]
pub struct DiscretizationBank {
    pub experts: Vec<Linear>,
    pub gate: Linear,
    /// Trainable bias added before the softplus that enforces Δ > 0.
    pub delta_bias: ParamId,
    pub expert_count: usize,
}

impl DiscretizationBank {
    /// `width` is both the channel dimension of the pooled feature fed
    /// to the gate and the per-token Δ dimension.
    pub fn new(store: &mut ParamStore, width: usize, expert_count: usize, rng: &mut impl Rng) -> Result<Self> {
        if expert_count < 1 {
            return Err(Error::Config("expert count must be at least 1".into()));
        }
        let experts = (0..expert_count)
            .map(|i| Linear::new(store, &format!("bank.expert{i}"), width, width, rng))
            .collect();
        let gate = Linear::new(store, "bank.gate", width, expert_count, rng);
        // Initial Δ ≈ softplus(bias) sampled log-uniformly in [0.01, 0.1].
        let (lo, hi) = (0.01f64.ln(), 0.1f64.ln());
        let bias: Vec<f64> = (0..width)
            .map(|_| {
                let dt = (lo + rng.gen::<f64>() * (hi - lo)).exp();
                // inverse softplus
                (dt.exp() - 1.0).ln()
            })
            .collect();
        let delta_bias = store.register("bank.delta_bias", Tensor::new(vec![width], bias)?);
        Ok(DiscretizationBank { experts, gate, delta_bias, expert_count })
    }

    /// Raw (pre-softplus) Δ candidate of a single expert, `[l, width]`.
    pub fn expert_delta<'t>(
        &self,
        p: &BoundParams<'t>,
        index: usize,
        x_hat: Var<'t>,
    ) -> Result<Var<'t>> {
        let expert = self
            .experts
            .get(index)
            .ok_or_else(|| Error::Contract(format!("expert index {index} out of range")))?;
        expert.forward(p, x_hat)
    }

    /// All raw Δ candidates.
    pub fn expert_deltas<'t>(&self, p: &BoundParams<'t>, x_hat: Var<'t>) -> Result<Vec<Var<'t>>> {
        (0..self.expert_count).map(|i| self.expert_delta(p, i, x_hat)).collect()
    }

    /// Gate logits and full softmax weights for one pooled feature.
    pub fn gate_weights<'t>(&self, p: &BoundParams<'t>, pooled: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let logits = self.gate.forward(p, pooled)?;
        let weights = logits.softmax(0)?;
        Ok((logits, weights))
    }
}

/// Outcome of one routing decision.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub gate_logits: Vec<f64>,
    /// Renormalized weights over all experts; exactly the selected
    /// entries are nonzero and they sum to 1.
    pub weights: Vec<f64>,
    /// Selected expert indices, ascending.
    pub omega: Vec<usize>,
    pub n_k: usize,
}

/// Picks the `n_k` largest weights (ties broken toward the lower index)
/// and renormalizes them to sum to 1.
pub fn select_topk(w_full: &[f64], gate_logits: &[f64], n_k: usize) -> Result<RoutingDecision> {
    let n = w_full.len();
    if n_k < 1 || n_k > n {
        return Err(Error::Contract(format!("top-k count {n_k} outside [1, {n}]")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    // stable sort keeps the lower index first among ties
    idx.sort_by(|&a, &b| w_full[b].partial_cmp(&w_full[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut omega: Vec<usize> = idx[..n_k].to_vec();
    omega.sort_unstable();
    let total: f64 = omega.iter().map(|&i| w_full[i]).sum();
    let mut weights = vec![0.0; n];
    for &i in &omega {
        weights[i] = w_full[i] / total;
    }
    Ok(RoutingDecision { gate_logits: gate_logits.to_vec(), weights, omega, n_k })
}

/// Aggregated Δ of one sample: raw weighted sum of the selected
/// candidates, and the strictly positive Δ fed to the scan.
pub struct AggregatedDelta<'t> {
    /// Σ w̃_i · Δ_i over the selected experts (pre-softplus, pre-bias).
    pub raw: Var<'t>,
    /// softplus(raw + bias), elementwise > 0.
    pub positive: Var<'t>,
}

/// Weighted aggregation of the selected candidates. Gradients flow into
/// both the gate (through the renormalized weights) and the selected
/// expert projections.
pub fn aggregate_delta<'t>(
    tape: &'t Tape,
    bank: &DiscretizationBank,
    p: &BoundParams<'t>,
    x_hat: Var<'t>,
    w_full: Var<'t>,
    decision: &RoutingDecision,
) -> Result<AggregatedDelta<'t>> {
    let selected: Vec<Var<'t>> = decision
        .omega
        .iter()
        .map(|&i| w_full.get(i))
        .collect::<Result<_>>()?;
    let total = tape.add_n(&selected)?;
    let mut raw: Option<Var<'t>> = None;
    for (pos, &i) in decision.omega.iter().enumerate() {
        let weight = selected[pos].div(total)?;
        let term = bank.expert_delta(p, i, x_hat)?.mul(weight)?;
        raw = Some(match raw {
            Some(acc) => acc.add(term)?,
            None => term,
        });
    }
    let raw = raw.ok_or_else(|| Error::Contract("empty selection".into()))?;
    let cols = raw.shape()[1];
    let bias = p.var(bank.delta_bias).reshape(vec![1, cols])?;
    let positive = raw.add(bias)?.softplus();
    Ok(AggregatedDelta { raw, positive })
}

/// Router z-loss: mean over the batch of (logsumexp of the gate
/// logits)².
pub fn z_loss<'t>(tape: &'t Tape, gate_logits: &[Var<'t>]) -> Result<Var<'t>> {
    if gate_logits.is_empty() {
        return Err(Error::Contract("z_loss needs at least one sample".into()));
    }
    let mut terms = Vec::with_capacity(gate_logits.len());
    for &logits in gate_logits {
        let shift = logits.value().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = logits.add_scalar(-shift).exp().sum().log()?.add_scalar(shift);
        terms.push(lse.mul(lse)?);
    }
    tape.mean_of(&terms)
}

/// Rounds N·σ up to the nearest integer, clamped into [1, N].
pub fn route_count(sigma: f64, n: usize) -> usize {
    ((n as f64 * sigma).ceil() as usize).clamp(1, n)
}

/// Per-class feature means maintained by exponential moving average.
///
/// Prototypes are statistics, not parameters: nothing here touches the
/// tape and no gradient reaches them.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeStore {
    means: Vec<Vec<f64>>,
    seen: Vec<bool>,
    dim: usize,
    momentum: f64,
    lambda0: f64,
}

impl PrototypeStore {
    pub fn new(classes: usize, dim: usize, momentum: f64, lambda0: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside (0,1)")));
        }
        if lambda0 <= 0.0 {
            return Err(Error::Config("lambda0 must be positive".into()));
        }
        Ok(PrototypeStore {
            means: vec![vec![0.0; dim]; classes],
            seen: vec![false; classes],
            dim,
            momentum,
            lambda0,
        })
    }

    pub fn classes(&self) -> usize {
        self.seen.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn lambda0(&self) -> f64 {
        self.lambda0
    }

    pub fn seen(&self, class: usize) -> bool {
        self.seen.get(class).copied().unwrap_or(false)
    }

    pub fn seen_count(&self) -> usize {
        self.seen.iter().filter(|&&s| s).count()
    }

    pub fn mean(&self, class: usize) -> Option<&[f64]> {
        self.seen(class).then(|| self.means[class].as_slice())
    }

    /// One EMA step per class present in the batch: an unseen class is
    /// initialized to its batch mean; a seen class moves by
    /// `m·M + (1−m)·mean`.
    pub fn update(&mut self, features: &[Vec<f64>], labels: &[usize]) -> Result<()> {
        if features.len() != labels.len() {
            return Err(Error::Contract("features/labels length mismatch".into()));
        }
        for (f, &y) in features.iter().zip(labels) {
            if y >= self.classes() {
                return Err(Error::Contract(format!(
                    "label {y} outside configured {} classes",
                    self.classes()
                )));
            }
            if f.len() != self.dim {
                return Err(Error::dim("update_prototypes", "feature dimension mismatch"));
            }
        }
        let mut classes: Vec<usize> = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        for c in classes {
            let members: Vec<&Vec<f64>> =
                features.iter().zip(labels).filter(|(_, &y)| y == c).map(|(f, _)| f).collect();
            let mut batch_mean = vec![0.0; self.dim];
            for f in &members {
                for (dst, &v) in batch_mean.iter_mut().zip(f.iter()) {
                    *dst += v;
                }
            }
            for v in &mut batch_mean {
                *v /= members.len() as f64;
            }
            if self.seen[c] {
                let m = self.momentum;
                for (dst, src) in self.means[c].iter_mut().zip(batch_mean) {
                    *dst = m * *dst + (1.0 - m) * src;
                }
            } else {
                self.means[c] = batch_mean;
                self.seen[c] = true;
            }
        }
        Ok(())
    }

    /// Margin-based uncertainty of class `k`: the mean over other seen
    /// classes `c` of exp(−λ0·‖M_k − M_c‖₂). With fewer than two seen
    /// classes there is no margin to measure and σ = 1.
    pub fn class_uncertainty(&self, k: usize) -> Result<f64> {
        if !self.seen(k) {
            return Err(Error::Contract(format!("class {k} has no prototype yet")));
        }
        let others: Vec<usize> =
            (0..self.classes()).filter(|&c| c != k && self.seen[c]).collect();
        if others.is_empty() {
            return Ok(1.0);
        }
        let mk = &self.means[k];
        let sum: f64 = others
            .iter()
            .map(|&c| (-self.lambda0 * euclidean(mk, &self.means[c])).exp())
            .sum();
        Ok(sum / others.len() as f64)
    }

    /// Same margin measure with an input feature in place of M_k,
    /// averaged over all seen prototypes (inference-time routing).
    pub fn input_uncertainty(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::dim("input_uncertainty", "feature dimension mismatch"));
        }
        let seen: Vec<usize> = (0..self.classes()).filter(|&c| self.seen[c]).collect();
        if seen.is_empty() {
            return Err(Error::Contract("no prototypes recorded yet".into()));
        }
        let sum: f64 =
            seen.iter().map(|&c| (-self.lambda0 * euclidean(x, &self.means[c])).exp()).sum();
        Ok(sum / seen.len() as f64)
    }

    /// Raw parts for checkpointing.
    pub fn raw(&self) -> (&[Vec<f64>], &[bool], f64, f64) {
        (&self.means, &self.seen, self.momentum, self.lambda0)
    }

    pub fn from_raw(
        means: Vec<Vec<f64>>,
        seen: Vec<bool>,
        momentum: f64,
        lambda0: f64,
    ) -> Result<Self> {
        if means.len() != seen.len() {
            return Err(Error::Contract("prototype mean/seen length mismatch".into()));
        }
        let dim = means.first().map(|m| m.len()).unwrap_or(0);
        if means.iter().any(|m| m.len() != dim) {
            return Err(Error::Contract("ragged prototype matrix".into()));
        }
        if means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite prototype".into()));
        }
        Ok(PrototypeStore { means, seen, dim, momentum, lambda0 })
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
