//! Reverse topological sweep over a recorded tape.

use super::kernels;
use super::{Op, Tape, Var};
use crate::error::{Error, Result};

impl Tape {
    /// Runs reverse-mode differentiation from a scalar loss node and
    /// accumulates (`+=`) gradients into every `requires_grad` node.
    ///
    /// Calling backward twice without resetting the tape accumulates
    /// into the same gradients.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = loss.id();
        if nodes[root].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[root].shape
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);

        for id in (0..=root).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };

            let acc = |pid: usize, grads: &mut Vec<Option<Vec<f64>>>| -> Option<()> {
                if !nodes[pid].requires_grad {
                    return None;
                }
                if grads[pid].is_none() {
                    grads[pid] = Some(vec![0.0; nodes[pid].data.len()]);
                }
                Some(())
            };

            match &nodes[id].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for &pid in &[*a, *b] {
                        if acc(pid, &mut grads).is_some() {
                            let gp = grads[pid].as_mut().unwrap();
                            if nodes[pid].shape == nodes[id].shape {
                                for (dst, &src) in gp.iter_mut().zip(g.iter()) {
                                    *dst += src;
                                }
                            } else {
                                let other = if pid == *a { *b } else { *a };
                                kernels::bcast_walk(
                                    &nodes[pid].shape,
                                    &nodes[other].shape,
                                    &nodes[id].shape,
                                    |pi, _, oi| gp[pi] += g[oi],
                                );
                            }
                        }
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if acc(a, &mut grads).is_some() {
                        let gp = grads[a].as_mut().unwrap();
                        kernels::bcast_walk(&nodes[a].shape, &nodes[b].shape, &nodes[id].shape, |ai, _, oi| {
                            gp[ai] += g[oi]
                        });
                    }
                    if acc(b, &mut grads).is_some() {
                        let gp = grads[b].as_mut().unwrap();
                        kernels::bcast_walk(&nodes[a].shape, &nodes[b].shape, &nodes[id].shape, |_, bi, oi| {
                            gp[bi] -= g[oi]
                        });
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (ad, bd) = (&nodes[a].data, &nodes[b].data);
                    if acc(a, &mut grads).is_some() {
                        let gp = grads[a].as_mut().unwrap();
                        kernels::bcast_walk(&nodes[a].shape, &nodes[b].shape, &nodes[id].shape, |ai, bi, oi| {
                            gp[ai] += g[oi] * bd[bi]
                        });
                    }
                    if acc(b, &mut grads).is_some() {
                        let gp = grads[b].as_mut().unwrap();
                        kernels::bcast_walk(&nodes[a].shape, &nodes[b].shape, &nodes[id].shape, |ai, bi, oi| {
                            gp[bi] += g[oi] * ad[ai]
                        });
                    }
                }
                Op::Div(a, b) => {
                    let (a, b) = (*a, *b);
                    let (ad, bd) = (&nodes[a].data, &nodes[b].data);
                    if acc(a, &mut grads).is_some() {
                        let gp = grads[a].as_mut().unwrap();
                        kernels::bcast_walk(&nodes[a].shape, &nodes[b].shape, &nodes[id].shape, |ai, bi, oi| {
                            gp[ai] += g[oi] / bd[bi]
                        });
                    }
                    if acc(b, &mut grads).is_some() {
                        let gp = grads[b].as_mut().unwrap();
                        kernels::bcast_walk(&nodes[a].shape, &nodes[b].shape, &nodes[id].shape, |ai, bi, oi| {
                            gp[bi] -= g[oi] * ad[ai] / (bd[bi] * bd[bi])
                        });
                    }
                }
                Op::Neg(a) => {
                    if acc(*a, &mut grads).is_some() {
                        let gp = grads[*a].as_mut().unwrap();
                        for (dst, &src) in gp.iter_mut().zip(g.iter()) {
                            *dst -= src;
                        }
                    }
                }
                Op::Exp(a) => {
                    if acc(*a, &mut grads).is_some() {
                        let out = &nodes[id].data;
                        let gp = grads[*a].as_mut().unwrap();
                        for i in 0..g.len() {
                            gp[i] += g[i] * out[i];
                        }
                    }
                }
                Op::Log(a) => {
                    if acc(*a, &mut grads).is_some() {
                        let xd = &nodes[*a].data;
                        let gp = grads[*a].as_mut().unwrap();
                        for i in 0..g.len() {
                            gp[i] += g[i] / xd[i];
                        }
                    }
                }
                Op::Sqrt(a) => {
                    if acc(*a, &mut grads).is_some() {
                        let out = &nodes[id].data;
                        let gp = grads[*a].as_mut().unwrap();
                        for i in 0..g.len() {
                            gp[i] += g[i] * 0.5 / out[i];
                        }
                    }
                }
                Op::Silu(a) => {
                    if acc(*a, &mut grads).is_some() {
                        let xd = &nodes[*a].data;
                        let gp = grads[*a].as_mut().unwrap();
                        for i in 0..g.len() {
                            gp[i] += g[i] * kernels::silu_grad(xd[i]);
                        }
                    }
                }
                Op::Softplus(a) => {
                    if acc(*a, &mut grads).is_some() {
                        let xd = &nodes[*a].data;
                        let gp = grads[*a].as_mut().unwrap();
                        for i in 0..g.len() {
                            gp[i] += g[i] * kernels::sigmoid(xd[i]);
                        }
                    }
                }
                Op::AddScalar(a) => {
                    if acc(*a, &mut grads).is_some() {
                        let gp = grads[*a].as_mut().unwrap();
                        for (dst, &src) in gp.iter_mut().zip(g.iter()) {
                            *dst += src;
                        }
                    }
                }
                Op::MulScalar(a, c) => {
                    if acc(*a, &mut grads).is_some() {
                        let gp = grads[*a].as_mut().unwrap();
                        for (dst, &src) in gp.iter_mut().zip(g.iter()) {
                            *dst += src * c;
                        }
                    }
                }
                Op::ClampMin(a, c) => {
                    if acc(*a, &mut grads).is_some() {
                        let xd = &nodes[*a].data;
                        let gp = grads[*a].as_mut().unwrap();
                        for i in 0..g.len() {
                            if xd[i] >= *c {
                                gp[i] += g[i];
                            }
                        }
                    }
                }
                Op::Matmul { a, b, m, k, n } => {
                    let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                    if acc(a, &mut grads).is_some() {
                        kernels::matmul_acc_grad_a(&g, &nodes[b].data, grads[a].as_mut().unwrap(), m, k, n);
                    }
                    if acc(b, &mut grads).is_some() {
                        kernels::matmul_acc_grad_b(&nodes[a].data, &g, grads[b].as_mut().unwrap(), m, k, n);
                    }
                }
                Op::Softmax { a, axis } => {
                    if acc(*a, &mut grads).is_some() {
                        kernels::softmax_backward(
                            &nodes[id].data,
                            &g,
                            grads[*a].as_mut().unwrap(),
                            &nodes[id].shape,
                            *axis,
                        );
                    }
                }
                Op::Sum(a) => {
                    if acc(*a, &mut grads).is_some() {
                        let gp = grads[*a].as_mut().unwrap();
                        for dst in gp.iter_mut() {
                            *dst += g[0];
                        }
                    }
                }
                Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
                    if acc(*a, &mut grads).is_some() {
                        let (outer, axn, inner) = kernels::lane_dims(&nodes[*a].shape, *axis);
                        let scale = if matches!(nodes[id].op, Op::MeanAxis { .. }) {
                            1.0 / axn as f64
                        } else {
                            1.0
                        };
                        let gp = grads[*a].as_mut().unwrap();
                        for o in 0..outer {
                            for t in 0..axn {
                                let base = (o * axn + t) * inner;
                                for i in 0..inner {
                                    gp[base + i] += g[o * inner + i] * scale;
                                }
                            }
                        }
                    }
                }
                Op::Reshape(a) => {
                    if acc(*a, &mut grads).is_some() {
                        let gp = grads[*a].as_mut().unwrap();
                        for (dst, &src) in gp.iter_mut().zip(g.iter()) {
                            *dst += src;
                        }
                    }
                }
                Op::PermuteRows { a, perm } => {
                    if acc(*a, &mut grads).is_some() {
                        let rows = perm.len();
                        let row_len = g.len() / rows.max(1);
                        let gp = grads[*a].as_mut().unwrap();
                        for (t, &src) in perm.iter().enumerate() {
                            for i in 0..row_len {
                                gp[src * row_len + i] += g[t * row_len + i];
                            }
                        }
                    }
                }
                Op::Get { a, index } => {
                    if acc(*a, &mut grads).is_some() {
                        grads[*a].as_mut().unwrap()[*index] += g[0];
                    }
                }
                Op::AddN(parents) => {
                    for &pid in parents.iter() {
                        if acc(pid, &mut grads).is_some() {
                            let gp = grads[pid].as_mut().unwrap();
                            for (dst, &src) in gp.iter_mut().zip(g.iter()) {
                                *dst += src;
                            }
                        }
                    }
                }
                Op::Conv2d { x, k, bias, h, w, cin, cout, ks } => {
                    let (x, k) = (*x, *k);
                    let need_x = acc(x, &mut grads).is_some();
                    let need_k = acc(k, &mut grads).is_some();
                    let need_b = bias.map(|b| acc(b, &mut grads).is_some()).unwrap_or(false);
                    // split the grads vec to hold multiple &mut entries
                    let (gx, gk, gb) = take3(&mut grads, need_x.then_some(x), need_k.then_some(k), bias.filter(|_| need_b));
                    let (mut gx, mut gk, mut gb) = (gx, gk, gb);
                    kernels::conv2d_backward(
                        &nodes[x].data,
                        &nodes[k].data,
                        &g,
                        gx.as_mut(),
                        gk.as_mut(),
                        gb.as_mut(),
                        *h,
                        *w,
                        *cin,
                        *cout,
                        *ks,
                    );
                    put3(&mut grads, need_x.then_some(x), gx, need_k.then_some(k), gk, bias.filter(|_| need_b), gb);
                }
                Op::DwConv2d { x, k, h, w, c, ks } => {
                    let (x, k) = (*x, *k);
                    let need_x = acc(x, &mut grads).is_some();
                    let need_k = acc(k, &mut grads).is_some();
                    let (gx, gk, _) = take3(&mut grads, need_x.then_some(x), need_k.then_some(k), None);
                    let (mut gx, mut gk) = (gx, gk);
                    kernels::dwconv2d_backward(
                        &nodes[x].data,
                        &nodes[k].data,
                        &g,
                        gx.as_mut(),
                        gk.as_mut(),
                        *h,
                        *w,
                        *c,
                        *ks,
                    );
                    put3(&mut grads, need_x.then_some(x), gx, need_k.then_some(k), gk, None, None);
                }
                Op::AvgPool2 { x, h, w, c } => {
                    if acc(*x, &mut grads).is_some() {
                        let (oh, ow, oc) = (*h / 2, *w / 2, *c);
                        let gp = grads[*x].as_mut().unwrap();
                        for y in 0..oh {
                            for xx in 0..ow {
                                for ci in 0..oc {
                                    let gv = g[(y * ow + xx) * oc + ci] * 0.25;
                                    for dy in 0..2 {
                                        for dx in 0..2 {
                                            gp[((2 * y + dy) * w + 2 * xx + dx) * oc + ci] += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Scan { x, abar, bbar, c_seq, l, d, n, hidden } => {
                    let (x, abar, bbar, c_seq) = (*x, *abar, *bbar, *c_seq);
                    let need_x = acc(x, &mut grads).is_some();
                    let need_a = acc(abar, &mut grads).is_some();
                    let need_b = acc(bbar, &mut grads).is_some();
                    let need_c = acc(c_seq, &mut grads).is_some();
                    let mut gx = if need_x { grads[x].take() } else { None };
                    let mut ga = if need_a { grads[abar].take() } else { None };
                    let mut gb = if need_b { grads[bbar].take() } else { None };
                    let mut gc = if need_c { grads[c_seq].take() } else { None };
                    kernels::scan_backward(
                        &nodes[x].data,
                        &nodes[abar].data,
                        &nodes[bbar].data,
                        &nodes[c_seq].data,
                        hidden,
                        &g,
                        gx.as_mut(),
                        ga.as_mut(),
                        gb.as_mut(),
                        gc.as_mut(),
                        *l,
                        *d,
                        *n,
                    );
                    if need_x {
                        grads[x] = gx;
                    }
                    if need_a {
                        grads[abar] = ga;
                    }
                    if need_b {
                        grads[bbar] = gb;
                    }
                    if need_c {
                        grads[c_seq] = gc;
                    }
                }
            }

            grads[id] = Some(g);
        }

        drop(nodes);
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                match &mut nodes[id].grad {
                    Some(existing) => {
                        for (dst, src) in existing.iter_mut().zip(g) {
                            *dst += src;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

/// Temporarily removes up to three gradient buffers so the kernel can
/// write them simultaneously. Indices must be distinct.
fn take3(
    grads: &mut [Option<Vec<f64>>],
    a: Option<usize>,
    b: Option<usize>,
    c: Option<usize>,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let ga = a.and_then(|i| grads[i].take());
    let gb = b.and_then(|i| grads[i].take());
    let gc = c.and_then(|i| grads[i].take());
    (ga, gb, gc)
}

fn put3(
    grads: &mut [Option<Vec<f64>>],
    a: Option<usize>,
    ga: Option<Vec<f64>>,
    b: Option<usize>,
    gb: Option<Vec<f64>>,
    c: Option<usize>,
    gc: Option<Vec<f64>>,
) {
    if let (Some(i), Some(g)) = (a, ga) {
        grads[i] = Some(g);
    }
    if let (Some(i), Some(g)) = (b, gb) {
        grads[i] = Some(g);
    }
    if let (Some(i), Some(g)) = (c, gc) {
        grads[i] = Some(g);
    }
}
