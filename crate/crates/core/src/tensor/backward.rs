//! Backward rules. `apply` receives the node's upstream gradient, its output
//! data, shape, and parents, and adds each parent's contribution into that
//! parent's gradient buffer. Parents that do not require gradients are
//! skipped. Loop orders mirror the forward kernels so accumulation is
//! deterministic.

use super::ops::sigmoid_val;
use super::{numel_of, Op, Tensor};
use crate::scalar::Scalar;

pub(super) fn apply<S: Scalar>(
    op: &Op<S>,
    g: &[S],
    y: &[S],
    shape: &[usize],
    parents: &[Tensor<S>],
) {
    match op {
        Op::Leaf => {}

        Op::Add => {
            let (a, b) = (&parents[0], &parents[1]);
            if a.requires_grad() {
                a.accumulate_grad(|buf| {
                    for (bi, &gi) in buf.iter_mut().zip(g) {
                        *bi += gi;
                    }
                });
            }
            if b.requires_grad() {
                let bn = b.numel();
                b.accumulate_grad(|buf| {
                    for (i, &gi) in g.iter().enumerate() {
                        buf[i % bn] += gi;
                    }
                });
            }
        }

        Op::Sub => {
            let (a, b) = (&parents[0], &parents[1]);
            if a.requires_grad() {
                a.accumulate_grad(|buf| {
                    for (bi, &gi) in buf.iter_mut().zip(g) {
                        *bi += gi;
                    }
                });
            }
            if b.requires_grad() {
                let bn = b.numel();
                b.accumulate_grad(|buf| {
                    for (i, &gi) in g.iter().enumerate() {
                        buf[i % bn] -= gi;
                    }
                });
            }
        }

        Op::Mul => {
            let (a, b) = (&parents[0], &parents[1]);
            let bn = b.numel();
            if a.requires_grad() {
                a.accumulate_grad(|buf| {
                    for (i, &gi) in g.iter().enumerate() {
                        buf[i] += gi * b.data()[i % bn];
                    }
                });
            }
            if b.requires_grad() {
                b.accumulate_grad(|buf| {
                    for (i, &gi) in g.iter().enumerate() {
                        buf[i % bn] += gi * a.data()[i];
                    }
                });
            }
        }

        Op::Div => {
            let (a, b) = (&parents[0], &parents[1]);
            if a.requires_grad() {
                a.accumulate_grad(|buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i] / b.data()[i];
                    }
                });
            }
            if b.requires_grad() {
                b.accumulate_grad(|buf| {
                    for i in 0..g.len() {
                        let bv = b.data()[i];
                        buf[i] -= g[i] * a.data()[i] / (bv * bv);
                    }
                });
            }
        }

        Op::Neg => acc_unary(&parents[0], g, |_, gi| -gi),

        Op::MulScalar(c) => {
            let c = *c;
            acc_unary(&parents[0], g, move |_, gi| gi * c);
        }

        Op::AddScalar(_) => acc_unary(&parents[0], g, |_, gi| gi),

        Op::Exp => {
            let p = &parents[0];
            if p.requires_grad() {
                p.accumulate_grad(|buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * y[i];
                    }
                });
            }
        }

        Op::Sigmoid => {
            let p = &parents[0];
            if p.requires_grad() {
                p.accumulate_grad(|buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * y[i] * (S::one() - y[i]);
                    }
                });
            }
        }

        Op::Relu => {
            let p = &parents[0];
            if p.requires_grad() {
                p.accumulate_grad(|buf| {
                    for i in 0..g.len() {
                        if p.data()[i] > S::zero() {
                            buf[i] += g[i];
                        }
                    }
                });
            }
        }

        Op::Softplus => {
            let p = &parents[0];
            if p.requires_grad() {
                p.accumulate_grad(|buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * sigmoid_val(p.data()[i]);
                    }
                });
            }
        }

        Op::Minimum | Op::Maximum => {
            let (a, b) = (&parents[0], &parents[1]);
            let a_wins: fn(S, S) -> bool = match op {
                Op::Minimum => |x, y| x <= y,
                _ => |x, y| x >= y,
            };
            if a.requires_grad() {
                a.accumulate_grad(|buf| {
                    for i in 0..g.len() {
                        if a_wins(a.data()[i], b.data()[i]) {
                            buf[i] += g[i];
                        }
                    }
                });
            }
            if b.requires_grad() {
                b.accumulate_grad(|buf| {
                    for i in 0..g.len() {
                        if !a_wins(a.data()[i], b.data()[i]) {
                            buf[i] += g[i];
                        }
                    }
                });
            }
        }

        Op::Clamp(lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            let p = &parents[0];
            if p.requires_grad() {
                p.accumulate_grad(|buf| {
                    for i in 0..g.len() {
                        let x = p.data()[i];
                        if x >= lo && x <= hi {
                            buf[i] += g[i];
                        }
                    }
                });
            }
        }

        Op::Matmul => {
            let (a, b) = (&parents[0], &parents[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            matmul_grads(a, b, g, m, k, n, 0, 0, 0);
        }

        Op::Bmm => {
            let (a, b) = (&parents[0], &parents[1]);
            let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let n = b.shape()[2];
            for i in 0..bs {
                matmul_grads(a, b, &g[i * m * n..(i + 1) * m * n], m, k, n, i * m * k, i * k * n, 0);
            }
        }

        Op::TransposeLast2 => {
            let p = &parents[0];
            if p.requires_grad() {
                let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let batch = numel_of(&shape[..shape.len() - 2]);
                p.accumulate_grad(|buf| {
                    for bi in 0..batch {
                        for i in 0..r {
                            for j in 0..c {
                                buf[bi * r * c + j * r + i] += g[bi * r * c + i * c + j];
                            }
                        }
                    }
                });
            }
        }

        Op::Reshape => acc_unary(&parents[0], g, |_, gi| gi),

        Op::SliceLast(start, end) => {
            let p = &parents[0];
            if p.requires_grad() {
                let d = *p.shape().last().unwrap();
                let width = end - start;
                let rows = g.len() / width;
                p.accumulate_grad(|buf| {
                    for r in 0..rows {
                        for j in 0..width {
                            buf[r * d + start + j] += g[r * width + j];
                        }
                    }
                });
            }
        }

        Op::ConcatLast => {
            let widths: Vec<usize> = parents.iter().map(|p| *p.shape().last().unwrap()).collect();
            let total: usize = widths.iter().sum();
            let rows = g.len() / total;
            let mut offset = 0;
            for (p, &w) in parents.iter().zip(&widths) {
                if p.requires_grad() {
                    let off = offset;
                    p.accumulate_grad(|buf| {
                        for r in 0..rows {
                            for j in 0..w {
                                buf[r * w + j] += g[r * total + off + j];
                            }
                        }
                    });
                }
                offset += w;
            }
        }

        Op::Stack => {
            let chunk = if parents.is_empty() { 0 } else { parents[0].numel() };
            for (k, p) in parents.iter().enumerate() {
                if p.requires_grad() {
                    p.accumulate_grad(|buf| {
                        for j in 0..chunk {
                            buf[j] += g[k * chunk + j];
                        }
                    });
                }
            }
        }

        Op::SelectRows(rows) => {
            let p = &parents[0];
            if p.requires_grad() {
                let rowlen = if rows.is_empty() { 0 } else { g.len() / rows.len() };
                p.accumulate_grad(|buf| {
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..rowlen {
                            buf[r * rowlen + j] += g[k * rowlen + j];
                        }
                    }
                });
            }
        }

        Op::Sum => acc_unary(&parents[0], &vec![g[0]; parents[0].numel()], |_, gi| gi),

        Op::Mean => {
            let n = S::from_f(parents[0].numel() as f64);
            let gi = g[0] / n;
            acc_unary(&parents[0], &vec![gi; parents[0].numel()], |_, v| v);
        }

        Op::SoftmaxRows => {
            let p = &parents[0];
            if p.requires_grad() {
                let cols = *shape.last().unwrap();
                let rows = g.len() / cols;
                p.accumulate_grad(|buf| {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mut dot = S::zero();
                        for j in 0..cols {
                            dot += gr[j] * yr[j];
                        }
                        for j in 0..cols {
                            buf[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
        }

        Op::NormalizeRows => {
            let p = &parents[0];
            if p.requires_grad() {
                let cols = *shape.last().unwrap();
                let rows = g.len() / cols;
                p.accumulate_grad(|buf| {
                    for r in 0..rows {
                        let xr = &p.data()[r * cols..(r + 1) * cols];
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mut s = S::zero();
                        for &v in xr {
                            s += v;
                        }
                        let mut dot = S::zero();
                        for j in 0..cols {
                            dot += gr[j] * yr[j];
                        }
                        for j in 0..cols {
                            buf[r * cols + j] += (gr[j] - dot) / s;
                        }
                    }
                });
            }
        }

        Op::LayerNorm(eps) => {
            let (x, gamma, beta) = (&parents[0], &parents[1], &parents[2]);
            let d = *shape.last().unwrap();
            let rows = g.len() / d;
            let dn = S::from_f(d as f64);
            // Per-row recomputation of mean, inverse std, and normalized input.
            let mut xhat = vec![S::zero(); g.len()];
            let mut invs = vec![S::zero(); rows];
            for r in 0..rows {
                let xr = &x.data()[r * d..(r + 1) * d];
                let mut mu = S::zero();
                for &v in xr {
                    mu += v;
                }
                mu = mu / dn;
                let mut var = S::zero();
                for &v in xr {
                    let c = v - mu;
                    var += c * c;
                }
                var = var / dn;
                let inv = (var + *eps).sqrt().recip();
                invs[r] = inv;
                for j in 0..d {
                    xhat[r * d + j] = (xr[j] - mu) * inv;
                }
            }
            if x.requires_grad() {
                x.accumulate_grad(|buf| {
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for j in 0..d {
                            let gg = gr[j] * gamma.data()[j];
                            m1 += gg;
                            m2 += gg * xhat[r * d + j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            let gg = gr[j] * gamma.data()[j];
                            buf[r * d + j] += invs[r] * (gg - m1 - xhat[r * d + j] * m2);
                        }
                    }
                });
            }
            if gamma.requires_grad() {
                gamma.accumulate_grad(|buf| {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
            }
            if beta.requires_grad() {
                beta.accumulate_grad(|buf| {
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j];
                        }
                    }
                });
            }
        }

        Op::ScaleChannels => {
            let (x, m) = (&parents[0], &parents[1]);
            let s = x.shape();
            let (n, p, d) = (s[0], s[1], s[2]);
            if x.requires_grad() {
                x.accumulate_grad(|buf| {
                    for i in 0..n {
                        for q in 0..p {
                            let base = (i * p + q) * d;
                            for j in 0..d {
                                buf[base + j] += g[base + j] * m.data()[i * d + j];
                            }
                        }
                    }
                });
            }
            if m.requires_grad() {
                m.accumulate_grad(|buf| {
                    for i in 0..n {
                        for q in 0..p {
                            let base = (i * p + q) * d;
                            for j in 0..d {
                                buf[i * d + j] += g[base + j] * x.data()[base + j];
                            }
                        }
                    }
                });
            }
        }

        Op::RoiAlign(plan) => {
            let fm = &parents[0];
            if fm.requires_grad() {
                let (h, w) = (plan.fm_h, plan.fm_w);
                fm.accumulate_grad(|buf| {
                    for q in 0..plan.queries {
                        for b in 0..plan.bins {
                            let taps = &plan.taps
                                [(q * plan.bins + b) * plan.group..(q * plan.bins + b + 1) * plan.group];
                            for ch in 0..plan.channels {
                                let gi = g[(q * plan.bins + b) * plan.channels + ch];
                                for t in taps {
                                    buf[ch * h * w + t.iy as usize * w + t.ix as usize] +=
                                        gi * S::from_f(t.w);
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

fn acc_unary<S: Scalar>(p: &Tensor<S>, g: &[S], f: impl Fn(usize, S) -> S) {
    if p.requires_grad() {
        p.accumulate_grad(|buf| {
            for (i, &gi) in g.iter().enumerate() {
                buf[i] += f(i, gi);
            }
        });
    }
}

/// Shared matmul gradient: `dA += g * B^T`, `dB += A^T * g`, at the given
/// batch offsets.
fn matmul_grads<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    g: &[S],
    m: usize,
    k: usize,
    n: usize,
    a_off: usize,
    b_off: usize,
    _g_off: usize,
) {
    if a.requires_grad() {
        a.accumulate_grad(|buf| {
            for i in 0..m {
                for t in 0..k {
                    let mut acc = S::zero();
                    for j in 0..n {
                        acc += g[i * n + j] * b.data()[b_off + t * n + j];
                    }
                    buf[a_off + i * k + t] += acc;
                }
            }
        });
    }
    if b.requires_grad() {
        b.accumulate_grad(|buf| {
            for t in 0..k {
                for j in 0..n {
                    let mut acc = S::zero();
                    for i in 0..m {
                        acc += a.data()[a_off + i * k + t] * g[i * n + j];
                    }
                    buf[b_off + t * n + j] += acc;
                }
            }
        });
    }
}
