//! Raw f64 slice kernels shared by forward and backward passes.
//!
//! Everything here is plain sequential code: results are bitwise
//! reproducible for a given input regardless of thread count.

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Broadcast result shape, or `None` if the shapes are incompatible.
///
/// Rules: equal shapes pass through; a one-element operand broadcasts
/// against anything; otherwise ranks must match and each dim must be
/// equal or 1.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a == b {
        return Some(a.to_vec());
    }
    if numel(a) == 1 {
        return Some(b.to_vec());
    }
    if numel(b) == 1 {
        return Some(a.to_vec());
    }
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            if x == y {
                Some(x)
            } else if x == 1 {
                Some(y)
            } else if y == 1 {
                Some(x)
            } else {
                None
            }
        })
        .collect()
}

/// Per-axis element strides of `shape` viewed under `out_shape`,
/// with stride 0 on broadcast axes. `shape` may be lower-rank (scalar).
fn bcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    if numel(shape) == 1 {
        return vec![0; rank];
    }
    debug_assert_eq!(shape.len(), rank);
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for ax in (0..rank).rev() {
        strides[ax] = if shape[ax] == 1 { 0 } else { acc };
        acc *= shape[ax];
    }
    strides
}

/// Walks every position of `out_shape`, handing `f` the flat offsets
/// into the two broadcast operands plus the output index.
pub(crate) fn bcast_walk(
    a_shape: &[usize],
    b_shape: &[usize],
    out_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out_shape);
    if n == 0 {
        return;
    }
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let astr = bcast_strides(a_shape, out_shape);
    let bstr = bcast_strides(b_shape, out_shape);
    let mut coords = vec![0usize; rank];
    let (mut ai, mut bi) = (0usize, 0usize);
    for out_i in 0..n {
        f(ai, bi, out_i);
        for ax in (0..rank).rev() {
            coords[ax] += 1;
            ai += astr[ax];
            bi += bstr[ax];
            if coords[ax] < out_shape[ax] {
                break;
            }
            coords[ax] = 0;
            ai -= astr[ax] * out_shape[ax];
            bi -= bstr[ax] * out_shape[ax];
        }
    }
}

pub(crate) fn binary_bcast(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    if a_shape == b_shape {
        return a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
    }
    let mut out = vec![0.0; numel(out_shape)];
    bcast_walk(a_shape, b_shape, out_shape, |ai, bi, oi| {
        out[oi] = f(a[ai], b[bi]);
    });
    out
}

/// C[m,n] = A[m,k] * B[k,n].
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// ga += g · Bᵀ  (g: [m,n], B: [k,n], ga: [m,k])
pub(crate) fn matmul_acc_grad_a(g: &[f64], b: &[f64], ga: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let garow = &mut ga[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += grow[j] * brow[j];
            }
            garow[p] += s;
        }
    }
}

/// gb += Aᵀ · g  (A: [m,k], g: [m,n], gb: [k,n])
pub(crate) fn matmul_acc_grad_b(a: &[f64], g: &[f64], gb: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let gbrow = &mut gb[p * n..(p + 1) * n];
            for j in 0..n {
                gbrow[j] += av * grow[j];
            }
        }
    }
}

/// (outer, axis_len, inner) decomposition for lane-wise reductions.
pub(crate) fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis`.
pub(crate) fn softmax(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, axn, inner) = lane_dims(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axn * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for t in 0..axn {
                mx = mx.max(x[base + t * inner]);
            }
            let mut sum = 0.0;
            for t in 0..axn {
                let e = (x[base + t * inner] - mx).exp();
                out[base + t * inner] = e;
                sum += e;
            }
            for t in 0..axn {
                out[base + t * inner] /= sum;
            }
        }
    }
    out
}

/// gx += s ⊙ (g − ⟨g, s⟩) per softmax lane.
pub(crate) fn softmax_backward(
    s: &[f64],
    g: &[f64],
    gx: &mut [f64],
    shape: &[usize],
    axis: usize,
) {
    let (outer, axn, inner) = lane_dims(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axn * inner + i;
            let mut dot = 0.0;
            for t in 0..axn {
                let idx = base + t * inner;
                dot += g[idx] * s[idx];
            }
            for t in 0..axn {
                let idx = base + t * inner;
                gx[idx] += s[idx] * (g[idx] - dot);
            }
        }
    }
}

/// Same-padded stride-1 2D convolution.
/// x: [h,w,cin], k: [kh,kw,cin,cout], bias: optional [cout] → out [h,w,cout].
pub(crate) fn conv2d(
    x: &[f64],
    k: &[f64],
    bias: Option<&[f64]>,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    ks: usize,
) -> Vec<f64> {
    let pad = ks / 2;
    let mut out = vec![0.0; h * w * cout];
    if let Some(b) = bias {
        for pos in 0..h * w {
            out[pos * cout..(pos + 1) * cout].copy_from_slice(b);
        }
    }
    for y in 0..h {
        for xx in 0..w {
            let orow = (y * w + xx) * cout;
            for dy in 0..ks {
                let sy = (y + dy).wrapping_sub(pad);
                if sy >= h {
                    continue;
                }
                for dx in 0..ks {
                    let sx = (xx + dx).wrapping_sub(pad);
                    if sx >= w {
                        continue;
                    }
                    let xrow = (sy * w + sx) * cin;
                    let krow = (dy * ks + dx) * cin * cout;
                    for ci in 0..cin {
                        let v = x[xrow + ci];
                        if v == 0.0 {
                            continue;
                        }
                        let kk = krow + ci * cout;
                        for co in 0..cout {
                            out[orow + co] += v * k[kk + co];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients for `conv2d`. Any of the grad buffers may be absent.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    k: &[f64],
    g: &[f64],
    gx: Option<&mut Vec<f64>>,
    gk: Option<&mut Vec<f64>>,
    gb: Option<&mut Vec<f64>>,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    ks: usize,
) {
    let pad = ks / 2;
    if let Some(gb) = gb {
        for pos in 0..h * w {
            for co in 0..cout {
                gb[co] += g[pos * cout + co];
            }
        }
    }
    let (mut gx, mut gk) = (gx, gk);
    if gx.is_none() && gk.is_none() {
        return;
    }
    for y in 0..h {
        for xx in 0..w {
            let grow = (y * w + xx) * cout;
            for dy in 0..ks {
                let sy = (y + dy).wrapping_sub(pad);
                if sy >= h {
                    continue;
                }
                for dx in 0..ks {
                    let sx = (xx + dx).wrapping_sub(pad);
                    if sx >= w {
                        continue;
                    }
                    let xrow = (sy * w + sx) * cin;
                    let krow = (dy * ks + dx) * cin * cout;
                    for ci in 0..cin {
                        let kk = krow + ci * cout;
                        if let Some(gx) = gx.as_deref_mut() {
                            let mut s = 0.0;
                            for co in 0..cout {
                                s += g[grow + co] * k[kk + co];
                            }
                            gx[xrow + ci] += s;
                        }
                        if let Some(gk) = gk.as_deref_mut() {
                            let v = x[xrow + ci];
                            if v != 0.0 {
                                for co in 0..cout {
                                    gk[kk + co] += v * g[grow + co];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise same-padded convolution: x [h,w,c], k [ks,ks,c] → [h,w,c].
pub(crate) fn dwconv2d(x: &[f64], k: &[f64], h: usize, w: usize, c: usize, ks: usize) -> Vec<f64> {
    let pad = ks / 2;
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let orow = (y * w + xx) * c;
            for dy in 0..ks {
                let sy = (y + dy).wrapping_sub(pad);
                if sy >= h {
                    continue;
                }
                for dx in 0..ks {
                    let sx = (xx + dx).wrapping_sub(pad);
                    if sx >= w {
                        continue;
                    }
                    let xrow = (sy * w + sx) * c;
                    let krow = (dy * ks + dx) * c;
                    for ci in 0..c {
                        out[orow + ci] += x[xrow + ci] * k[krow + ci];
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dwconv2d_backward(
    x: &[f64],
    k: &[f64],
    g: &[f64],
    gx: Option<&mut Vec<f64>>,
    gk: Option<&mut Vec<f64>>,
    h: usize,
    w: usize,
    c: usize,
    ks: usize,
) {
    let pad = ks / 2;
    let (mut gx, mut gk) = (gx, gk);
    for y in 0..h {
        for xx in 0..w {
            let grow = (y * w + xx) * c;
            for dy in 0..ks {
                let sy = (y + dy).wrapping_sub(pad);
                if sy >= h {
                    continue;
                }
                for dx in 0..ks {
                    let sx = (xx + dx).wrapping_sub(pad);
                    if sx >= w {
                        continue;
                    }
                    let xrow = (sy * w + sx) * c;
                    let krow = (dy * ks + dx) * c;
                    for ci in 0..c {
                        if let Some(gx) = gx.as_deref_mut() {
                            gx[xrow + ci] += g[grow + ci] * k[krow + ci];
                        }
                        if let Some(gk) = gk.as_deref_mut() {
                            gk[krow + ci] += g[grow + ci] * x[xrow + ci];
                        }
                    }
                }
            }
        }
    }
}

/// Selective scan forward. Returns (y [l,d], hidden [l,d,n]).
///
/// h_t = ā_t ⊙ h_{t-1} + b̄_t · x_t ;  y_{t,d} = Σ_n c_{t,n} · h_{t,d,n}
pub(crate) fn scan_forward(
    x: &[f64],
    abar: &[f64],
    bbar: &[f64],
    c_seq: &[f64],
    l: usize,
    d: usize,
    n: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; l * d];
    let mut hidden = vec![0.0; l * d * n];
    let mut h = vec![0.0; d * n];
    for t in 0..l {
        let to = t * d * n;
        let crow = &c_seq[t * n..(t + 1) * n];
        for di in 0..d {
            let xv = x[t * d + di];
            let base = di * n;
            let mut acc = 0.0;
            for ni in 0..n {
                let idx = base + ni;
                let hv = abar[to + idx] * h[idx] + bbar[to + idx] * xv;
                h[idx] = hv;
                hidden[to + idx] = hv;
                acc += crow[ni] * hv;
            }
            y[t * d + di] = acc;
        }
    }
    (y, hidden)
}

/// Backward of `scan_forward`. Grad buffers may individually be absent.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_backward(
    x: &[f64],
    abar: &[f64],
    bbar: &[f64],
    c_seq: &[f64],
    hidden: &[f64],
    gy: &[f64],
    gx: Option<&mut Vec<f64>>,
    gabar: Option<&mut Vec<f64>>,
    gbbar: Option<&mut Vec<f64>>,
    gc: Option<&mut Vec<f64>>,
    l: usize,
    d: usize,
    n: usize,
) {
    let (mut gx, mut gabar, mut gbbar, mut gc) = (gx, gabar, gbbar, gc);
    let mut gh = vec![0.0; d * n];
    for t in (0..l).rev() {
        let to = t * d * n;
        let crow = &c_seq[t * n..(t + 1) * n];
        for di in 0..d {
            let base = di * n;
            let gyv = gy[t * d + di];
            // through y_t = ⟨c_t, h_t⟩
            for ni in 0..n {
                let idx = base + ni;
                gh[idx] += gyv * crow[ni];
                if let Some(gc) = gc.as_deref_mut() {
                    gc[t * n + ni] += gyv * hidden[to + idx];
                }
            }
            // through h_t = ā_t ⊙ h_{t-1} + b̄_t · x_t
            let xv = x[t * d + di];
            let mut gxv = 0.0;
            for ni in 0..n {
                let idx = base + ni;
                let ghv = gh[idx];
                let hprev = if t > 0 { hidden[to - d * n + idx] } else { 0.0 };
                if let Some(ga) = gabar.as_deref_mut() {
                    ga[to + idx] += ghv * hprev;
                }
                if let Some(gb) = gbbar.as_deref_mut() {
                    gb[to + idx] += ghv * xv;
                }
                gxv += ghv * bbar[to + idx];
                gh[idx] = ghv * abar[to + idx];
            }
            if let Some(gx) = gx.as_deref_mut() {
                gx[t * d + di] += gxv;
            }
        }
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// ln(1 + eˣ), stable for large |x|.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
