//! Zero-order-hold discretization, the per-channel diagonal selective
//! recurrence, and four-direction spatial serialization.
//!
//! Shape conventions: a feature map of `h`×`w` tokens with `c` channels
//! is handled as a `[l, c]` matrix with `l = h·w`, rows in row-major
//! (row-forward) order. The state transition matrix `a` is `[d, n]`
//! with strictly negative entries; `delta` is `[l, d]` strictly
//! positive; per-token projections `b_seq`/`c_seq` are `[l, n]`.

use crate::error::{Error, Result};
use crate::params::{BoundParams, Linear};
use crate::tensor::{Op, Tape, Var};

/// How Δ and A are folded into the discrete-time recurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZohMode {
    /// Ā = exp(Δ·A), B̄ = (exp(Δ·A) − 1)/A · B (closed form for diagonal A)
    #[default]
    Exact,
    /// Ā = exp(Δ·A), B̄ = Δ·B
    Simplified,
}

impl ZohMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(ZohMode::Exact),
            "simplified" => Ok(ZohMode::Simplified),
            other => Err(Error::Config(format!("unknown zoh mode {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ZohMode::Exact => "exact",
            ZohMode::Simplified => "simplified",
        }
    }
}

/// One of the four spatial traversals of an h×w token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    RowForward,
    RowBackward,
    ColForward,
    ColBackward,
}

impl Direction {
    pub const ALL: [Direction; 4] =
        [Direction::RowForward, Direction::RowBackward, Direction::ColForward, Direction::ColBackward];

    pub fn from_index(i: usize) -> Result<Self> {
        Direction::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Config(format!("direction index {i} out of range 0..4")))
    }

    /// Token visit order: entry `t` is the row-major index of the `t`-th
    /// token emitted by this traversal.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        let l = h * w;
        match self {
            Direction::RowForward => (0..l).collect(),
            Direction::RowBackward => (0..l).rev().collect(),
            Direction::ColForward => {
                let mut o = Vec::with_capacity(l);
                for x in 0..w {
                    for y in 0..h {
                        o.push(y * w + x);
                    }
                }
                o
            }
            Direction::ColBackward => {
                let mut o = Direction::ColForward.order(h, w);
                o.reverse();
                o
            }
        }
    }
}

/// Inverse of a permutation, such that `inv[p[t]] = t`.
pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (t, &src) in perm.iter().enumerate() {
        inv[src] = t;
    }
    inv
}

/// Serializes a `[l, c]` token matrix along a traversal direction.
/// Deserialization is `permute_rows` with the inverse order.
pub fn serialize<'t>(tokens: Var<'t>, dir: Direction, h: usize, w: usize) -> Result<Var<'t>> {
    let shape = tokens.shape();
    if shape.first() != Some(&(h * w)) {
        return Err(Error::dim("serialize", format!("expected {} rows, got {:?}", h * w, shape)));
    }
    tokens.permute_rows(&dir.order(h, w))
}

fn check_domain(a: &Var<'_>, delta: &Var<'_>) -> Result<()> {
    if a.value().iter().any(|&v| v >= 0.0) {
        return Err(Error::domain("zoh_discretize", "state matrix entries must be strictly negative"));
    }
    if delta.value().iter().any(|&v| v <= 0.0) {
        return Err(Error::domain("zoh_discretize", "time scale entries must be strictly positive"));
    }
    Ok(())
}

/// Discretizes `(a, delta, b_seq)` into `(abar, bbar)`, both `[l, d, n]`.
pub fn zoh_discretize<'t>(
    a: Var<'t>,
    delta: Var<'t>,
    b_seq: Var<'t>,
    mode: ZohMode,
) -> Result<(Var<'t>, Var<'t>)> {
    check_domain(&a, &delta)?;
    let (l, d) = dims2("zoh_discretize", &delta)?;
    let (lb, n) = dims2("zoh_discretize", &b_seq)?;
    if lb != l {
        return Err(Error::dim("zoh_discretize", "delta and b_seq disagree on sequence length"));
    }
    let a2 = match a.shape().as_slice() {
        [ad, an] if *ad == d => a.reshape(vec![1, d, *an])?,
        other => return Err(Error::dim("zoh_discretize", format!("state matrix shape {other:?}"))),
    };
    let delta3 = delta.reshape(vec![l, d, 1])?;
    let b3 = b_seq.reshape(vec![l, 1, n])?;
    let abar = delta3.mul(a2)?.exp();
    let bbar = match mode {
        ZohMode::Exact => abar.add_scalar(-1.0).div(a2)?.mul(b3)?,
        ZohMode::Simplified => delta3.mul(b3)?,
    };
    Ok((abar, bbar))
}

/// Runs the fused recurrence h_t = ā_t ⊙ h_{t−1} + b̄_t·x_t,
/// y_t = ⟨c_t, h_t⟩ with h_0 = 0. Differentiable in all four inputs.
pub fn scan_recurrence<'t>(
    x: Var<'t>,
    abar: Var<'t>,
    bbar: Var<'t>,
    c_seq: Var<'t>,
    tape: &'t Tape,
) -> Result<Var<'t>> {
    let (l, d) = dims2("selective_scan", &x)?;
    let ashape = abar.shape();
    if ashape.len() != 3 || ashape[0] != l || ashape[1] != d {
        return Err(Error::dim("selective_scan", format!("abar shape {ashape:?}")));
    }
    let n = ashape[2];
    if bbar.shape() != ashape {
        return Err(Error::dim("selective_scan", "abar/bbar shape mismatch"));
    }
    if c_seq.shape() != vec![l, n] {
        return Err(Error::dim("selective_scan", format!("c_seq must be [{l}, {n}]")));
    }
    let (y, hidden) = crate::tensor::kernels::scan_forward(
        &x.value(),
        &abar.value(),
        &bbar.value(),
        &c_seq.value(),
        l,
        d,
        n,
    );
    let req =
        x.requires_grad() || abar.requires_grad() || bbar.requires_grad() || c_seq.requires_grad();
    Ok(tape.push(
        vec![l, d],
        y,
        Op::Scan { x: x.id(), abar: abar.id(), bbar: bbar.id(), c_seq: c_seq.id(), l, d, n, hidden },
        req,
    ))
}

/// Discretizes and scans one sequence: x is `[l, d]`, output `[l, d]`.
pub fn selective_scan<'t>(
    tape: &'t Tape,
    x: Var<'t>,
    a: Var<'t>,
    delta: Var<'t>,
    b_seq: Var<'t>,
    c_seq: Var<'t>,
    mode: ZohMode,
) -> Result<Var<'t>> {
    let (l, _) = dims2("selective_scan", &x)?;
    if delta.shape().first() != Some(&l) || b_seq.shape().first() != Some(&l) {
        return Err(Error::dim("selective_scan", "x, delta and b_seq disagree on length"));
    }
    let (abar, bbar) = zoh_discretize(a, delta, b_seq, mode)?;
    scan_recurrence(x, abar, bbar, c_seq, tape)
}

/// Per-direction input/output projections used by [`ss2d`].
#[derive(Debug, Clone)]
pub struct DirectionProjections {
    pub f_b: Linear,
    pub f_c: Linear,
}

/// Four-direction scan over an h×w token grid: serialize the tokens per
/// direction, discretize the shared Δ in the permuted order, scan, then
/// de-serialize and sum in fixed direction order.
#[allow(clippy::too_many_arguments)]
pub fn ss2d<'t>(
    tape: &'t Tape,
    tokens: Var<'t>,
    h: usize,
    w: usize,
    a: Var<'t>,
    delta: Var<'t>,
    dirs: &[DirectionProjections],
    params: &BoundParams<'t>,
    mode: ZohMode,
) -> Result<Var<'t>> {
    if dirs.is_empty() {
        return Err(Error::Config("ss2d needs at least one direction".into()));
    }
    check_domain(&a, &delta)?;
    let (l, d) = dims2("ss2d", &tokens)?;
    if l != h * w {
        return Err(Error::dim("ss2d", format!("{h}x{w} grid does not give {l} tokens")));
    }
    let n = a.shape()[1];

    // Shared across directions: Ā-core exp(Δ·A) and the exact-mode input
    // factor (Ā−1)/A, both [l,d,n] in row-forward order. Each direction
    // only permutes rows.
    let a2 = a.reshape(vec![1, d, n])?;
    let delta3 = delta.reshape(vec![l, d, 1])?;
    let abar = delta3.mul(a2)?.exp();
    let input_factor = match mode {
        ZohMode::Exact => abar.add_scalar(-1.0).div(a2)?,
        ZohMode::Simplified => delta3.mul(tape.constant(vec![1, 1, n], vec![1.0; n])?)?,
    };

    let mut acc: Option<Var<'t>> = None;
    for (i, proj) in dirs.iter().enumerate() {
        let dir = Direction::from_index(i)?;
        let order = dir.order(h, w);
        let xs = tokens.permute_rows(&order)?;
        let b_seq = proj.f_b.forward(params, xs)?;
        let c_seq = proj.f_c.forward(params, xs)?;
        let abar_i = abar.permute_rows(&order)?;
        let bbar_i = input_factor.permute_rows(&order)?.mul(b_seq.reshape(vec![l, 1, n])?)?;
        let y = scan_recurrence(xs, abar_i, bbar_i, c_seq, tape)?;
        let y = y.permute_rows(&inverse_permutation(&order))?;
        acc = Some(match acc {
            Some(prev) => prev.add(y)?,
            None => y,
        });
    }
    Ok(acc.expect("at least one direction"))
}

fn dims2(op: &'static str, v: &Var<'_>) -> Result<(usize, usize)> {
    let shape = v.shape();
    if shape.len() != 2 {
        return Err(Error::dim(op, format!("expected rank-2 input, got {shape:?}")));
    }
    Ok((shape[0], shape[1]))
}
