//! Loss terms: ETF alignment (DR), distribution matching (KL),
//! contrastive discretization, router z-loss, and cross-entropy for the
//! base head.

use crate::error::{Error, Result};
use crate::etf::EtfClassifier;
use crate::tensor::{Tape, Var};

const NORM_EPS: f64 = 1e-8;
const SMOOTH_EPS: f64 = 1e-8;

/// Mean over the batch of ½·(w_yᵀ·μ̂ − 1)² with μ̂ = μ / max(‖μ‖, ε).
pub fn dr_loss<'t>(
    tape: &'t Tape,
    mus: &[Var<'t>],
    labels: &[usize],
    etf: &EtfClassifier,
) -> Result<Var<'t>> {
    if mus.len() != labels.len() || mus.is_empty() {
        return Err(Error::Contract("dr_loss needs matching, non-empty batches".into()));
    }
    let mut terms = Vec::with_capacity(mus.len());
    for (&mu, &y) in mus.iter().zip(labels) {
        if y >= etf.classes() {
            return Err(Error::Contract(format!("label {y} outside ETF classes")));
        }
        let norm = mu.mul(mu)?.sum().sqrt()?.clamp_min(NORM_EPS);
        let mu_hat = mu.div(norm)?;
        let w_y = tape.constant(vec![etf.dim()], etf.class_vector(y).to_vec())?;
        let dot = mu_hat.mul(w_y)?.sum();
        let diff = dot.add_scalar(-1.0);
        terms.push(diff.mul(diff)?.mul_scalar(0.5));
    }
    tape.mean_of(&terms)
}

/// Mean KL(P ‖ Q) over the batch; both distributions are ε-smoothed and
/// renormalized first. With `detach_q` the branch side is treated as a
/// fixed target (ablation switch); by default gradients flow into both.
pub fn diff_loss<'t>(
    tape: &'t Tape,
    p_batch: &[Var<'t>],
    q_batch: &[Var<'t>],
    detach_q: bool,
) -> Result<Var<'t>> {
    if p_batch.len() != q_batch.len() || p_batch.is_empty() {
        return Err(Error::Contract("diff_loss needs matching, non-empty batches".into()));
    }
    let mut terms = Vec::with_capacity(p_batch.len());
    for (&p, &q) in p_batch.iter().zip(q_batch) {
        if p.shape() != q.shape() {
            return Err(Error::dim("diff_loss", "P and Q must share a shape"));
        }
        let k = p.numel() as f64;
        let q = if detach_q { q.detach() } else { q };
        let ps = p.add_scalar(SMOOTH_EPS).mul_scalar(1.0 / (1.0 + k * SMOOTH_EPS));
        let qs = q.add_scalar(SMOOTH_EPS).mul_scalar(1.0 / (1.0 + k * SMOOTH_EPS));
        let kl = ps.mul(ps.log()?.sub(qs.log()?)?)?.sum();
        terms.push(kl);
    }
    tape.mean_of(&terms)
}

/// Contrastive discretization loss over a batch of aggregated Δs:
///
///   −(1/B²)·Σ_m Σ_n (1[y_m=y_n] − 1[y_m≠y_n])·cos(Δ_m, Δ_n)
///
/// The double sum includes the diagonal, whose terms are the constant
/// +1 and carry no gradient; off-diagonal pairs are symmetric, so each
/// is built once and counted twice.
pub fn cont_loss<'t>(tape: &'t Tape, deltas: &[Var<'t>], labels: &[usize]) -> Result<Var<'t>> {
    let b = deltas.len();
    if b == 0 || labels.len() != b {
        return Err(Error::Contract("cont_loss needs matching, non-empty batches".into()));
    }
    let flat: Vec<Var<'t>> = deltas
        .iter()
        .map(|&d| d.reshape(vec![d.numel()]))
        .collect::<Result<_>>()?;
    let norms: Vec<Var<'t>> = flat
        .iter()
        .map(|&d| Ok(d.mul(d)?.sum().sqrt()?.clamp_min(NORM_EPS)))
        .collect::<Result<_>>()?;
    let mut off_diag: Vec<Var<'t>> = Vec::with_capacity(b * (b - 1) / 2);
    for m in 0..b {
        for n in m + 1..b {
            let cos = flat[m].mul(flat[n])?.sum().div(norms[m].mul(norms[n])?)?;
            let sign = if labels[m] == labels[n] { 1.0 } else { -1.0 };
            off_diag.push(cos.mul_scalar(sign));
        }
    }
    let bsq = (b * b) as f64;
    // diagonal contributes B constant terms of +1
    let diagonal = b as f64;
    let total = if off_diag.is_empty() {
        tape.scalar(diagonal)
    } else {
        tape.add_n(&off_diag)?.mul_scalar(2.0).add_scalar(diagonal)
    };
    Ok(total.mul_scalar(-1.0 / bsq))
}

/// Mean cross-entropy of integer labels under softmax of `logits`.
pub fn cross_entropy<'t>(
    tape: &'t Tape,
    logits_batch: &[Var<'t>],
    labels: &[usize],
) -> Result<Var<'t>> {
    if logits_batch.len() != labels.len() || logits_batch.is_empty() {
        return Err(Error::Contract("cross_entropy needs matching, non-empty batches".into()));
    }
    let mut terms = Vec::with_capacity(labels.len());
    for (&logits, &y) in logits_batch.iter().zip(labels) {
        if y >= logits.numel() {
            return Err(Error::Contract(format!("label {y} outside logit range")));
        }
        let shift = logits.value().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = logits.add_scalar(-shift).exp().sum().log()?.add_scalar(shift);
        terms.push(lse.sub(logits.get(y)?)?);
    }
    tape.mean_of(&terms)
}

/// The branch loss terms of one training step, kept separately for
/// logging, plus their weighted combination.
pub struct BranchLoss<'t> {
    pub dr: Var<'t>,
    pub diff: Var<'t>,
    pub cont: Var<'t>,
    pub z: Var<'t>,
    /// dr + α·diff + β·cont + z
    pub combined: Var<'t>,
}

/// Combines the branch loss terms with weights α (KL) and β
/// (contrastive).
pub fn s6mod_loss<'t>(
    dr: Var<'t>,
    diff: Var<'t>,
    cont: Var<'t>,
    z: Var<'t>,
    alpha: f64,
    beta: f64,
) -> Result<BranchLoss<'t>> {
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::Config("loss weights alpha and beta must be non-negative".into()));
    }
    let combined = dr
        .add(diff.mul_scalar(alpha))?
        .add(cont.mul_scalar(beta))?
        .add(z)?;
    Ok(BranchLoss { dr, diff, cont, z, combined })
}
