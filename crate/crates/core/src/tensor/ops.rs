//! Forward kernels. Each method checks shapes (panicking with both shapes on
//! a mismatch), computes the output in row-major order, and records an [`Op`]
//! node so backward can route gradients.

use super::{numel_of, Op, Tensor};
use crate::scalar::Scalar;

/// One bilinear tap into the feature map. The weight already includes the
/// 1/samples-per-bin averaging factor.
#[derive(Debug, Clone)]
pub(crate) struct Tap {
    pub iy: u32,
    pub ix: u32,
    pub w: f64,
}

/// Frozen sampling plan for one RoI-align call: for every query and output
/// bin, the bilinear taps whose weighted sum produces that bin.
#[derive(Debug, Clone)]
pub(crate) struct RoiPlan {
    pub queries: usize,
    pub bins: usize,
    /// Taps per (query, bin) group; `taps.len() == queries * bins * group`.
    pub group: usize,
    pub taps: Vec<Tap>,
    pub channels: usize,
    pub fm_h: usize,
    pub fm_w: usize,
}

fn require_same(op: &str, a: &[usize], b: &[usize]) {
    assert!(
        a == b,
        "{}: operand shapes {:?} and {:?} differ",
        op,
        a,
        b
    );
}

/// Allows either identical shapes or an rhs whose shape is a suffix of the
/// lhs shape (e.g. adding a `[d]` bias onto `[n, d]`).
fn require_suffix(op: &str, lhs: &[usize], rhs: &[usize]) {
    let ok = rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs;
    assert!(
        ok,
        "{}: rhs shape {:?} is neither equal to nor a suffix of lhs shape {:?}",
        op,
        rhs,
        lhs
    );
}

/// Per-row maxima of a `[rows, cols]`-viewed buffer. Shared by softmax and
/// the attention path that reproduces softmax's shift outside the op.
pub(crate) fn row_max<S: Scalar>(data: &[S], cols: usize) -> Vec<S> {
    assert!(cols > 0, "row_max: zero columns");
    data.chunks_exact(cols)
        .map(|row| {
            let mut m = S::neg_infinity();
            for &v in row {
                if v > m {
                    m = v;
                }
            }
            m
        })
        .collect()
}

fn binary_suffix<S: Scalar>(
    op_name: &str,
    a: &Tensor<S>,
    b: &Tensor<S>,
    op: Op<S>,
    f: impl Fn(S, S) -> S,
) -> Tensor<S> {
    require_suffix(op_name, a.shape(), b.shape());
    let bn = b.numel().max(1);
    let data: Vec<S> = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, b.data()[i % bn]))
        .collect();
    let rg = a.requires_grad() || b.requires_grad();
    Tensor::new_node(a.shape().to_vec(), data, rg, vec![a.clone(), b.clone()], op)
}

fn unary<S: Scalar>(a: &Tensor<S>, op: Op<S>, f: impl Fn(S) -> S) -> Tensor<S> {
    let data: Vec<S> = a.data().iter().map(|&x| f(x)).collect();
    Tensor::new_node(a.shape().to_vec(), data, a.requires_grad(), vec![a.clone()], op)
}

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, b: &Tensor<S>) -> Tensor<S> {
        binary_suffix("add", self, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&self, b: &Tensor<S>) -> Tensor<S> {
        binary_suffix("sub", self, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&self, b: &Tensor<S>) -> Tensor<S> {
        binary_suffix("mul", self, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&self, b: &Tensor<S>) -> Tensor<S> {
        require_same("div", self.shape(), b.shape());
        let data: Vec<S> = self
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x / y)
            .collect();
        let rg = self.requires_grad() || b.requires_grad();
        Tensor::new_node(
            self.shape().to_vec(),
            data,
            rg,
            vec![self.clone(), b.clone()],
            Op::Div,
        )
    }

    pub fn neg(&self) -> Tensor<S> {
        unary(self, Op::Neg, |x| -x)
    }

    pub fn mul_scalar(&self, c: impl Into<f64>) -> Tensor<S> {
        let c = S::from_f(c.into());
        unary(self, Op::MulScalar(c), |x| x * c)
    }

    pub fn add_scalar(&self, c: impl Into<f64>) -> Tensor<S> {
        let c = S::from_f(c.into());
        unary(self, Op::AddScalar(c), |x| x + c)
    }

    pub fn exp(&self) -> Tensor<S> {
        unary(self, Op::Exp, |x| x.exp())
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        unary(self, Op::Sigmoid, sigmoid_stable)
    }

    pub fn relu(&self) -> Tensor<S> {
        unary(self, Op::Relu, |x| if x > S::zero() { x } else { S::zero() })
    }

    /// `ln(1 + e^x)` computed without overflow for large `|x|`.
    pub fn softplus(&self) -> Tensor<S> {
        unary(self, Op::Softplus, softplus_stable)
    }

    /// |x| as a differentiable composite; gradient at exactly 0 is 0.
    pub fn abs_val(&self) -> Tensor<S> {
        self.relu().add(&self.neg().relu())
    }

    pub fn minimum(&self, b: &Tensor<S>) -> Tensor<S> {
        require_same("minimum", self.shape(), b.shape());
        let data: Vec<S> = self
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| if x <= y { x } else { y })
            .collect();
        let rg = self.requires_grad() || b.requires_grad();
        Tensor::new_node(
            self.shape().to_vec(),
            data,
            rg,
            vec![self.clone(), b.clone()],
            Op::Minimum,
        )
    }

    pub fn maximum(&self, b: &Tensor<S>) -> Tensor<S> {
        require_same("maximum", self.shape(), b.shape());
        let data: Vec<S> = self
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| if x >= y { x } else { y })
            .collect();
        let rg = self.requires_grad() || b.requires_grad();
        Tensor::new_node(
            self.shape().to_vec(),
            data,
            rg,
            vec![self.clone(), b.clone()],
            Op::Maximum,
        )
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<S> {
        assert!(lo <= hi, "clamp: lo {} exceeds hi {}", lo, hi);
        let (l, h) = (S::from_f(lo), S::from_f(hi));
        unary(self, Op::Clamp(l, h), |x| {
            if x < l {
                l
            } else if x > h {
                h
            } else {
                x
            }
        })
    }

    pub fn matmul(&self, b: &Tensor<S>) -> Tensor<S> {
        let (sa, sb) = (self.shape(), b.shape());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: incompatible shapes {:?} x {:?}",
            sa,
            sb
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        matmul_into(self.data(), b.data(), &mut out, m, k, n);
        let rg = self.requires_grad() || b.requires_grad();
        Tensor::new_node(vec![m, n], out, rg, vec![self.clone(), b.clone()], Op::Matmul)
    }

    /// Batched matmul: `[b, m, k] x [b, k, n] -> [b, m, n]`.
    pub fn bmm(&self, b: &Tensor<S>) -> Tensor<S> {
        let (sa, sb) = (self.shape(), b.shape());
        assert!(
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1],
            "bmm: incompatible shapes {:?} x {:?}",
            sa,
            sb
        );
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![S::zero(); bs * m * n];
        for i in 0..bs {
            matmul_into(
                &self.data()[i * m * k..(i + 1) * m * k],
                &b.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.requires_grad() || b.requires_grad();
        Tensor::new_node(
            vec![bs, m, n],
            out,
            rg,
            vec![self.clone(), b.clone()],
            Op::Bmm,
        )
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Tensor<S> {
        let s = self.shape();
        assert!(
            s.len() >= 2,
            "transpose_last2 needs rank >= 2, got shape {:?}",
            s
        );
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = numel_of(&s[..s.len() - 2]);
        let mut out = vec![S::zero(); self.numel()];
        for bi in 0..batch {
            let src = &self.data()[bi * r * c..(bi + 1) * r * c];
            let dst = &mut out[bi * r * c..(bi + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut shape = s.to_vec();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        Tensor::new_node(
            shape,
            out,
            self.requires_grad(),
            vec![self.clone()],
            Op::TransposeLast2,
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor<S> {
        assert!(
            numel_of(shape) == self.numel(),
            "reshape: {:?} has {} elements, target {:?} has {}",
            self.shape(),
            self.numel(),
            shape,
            numel_of(shape)
        );
        Tensor::new_node(
            shape.to_vec(),
            self.data().to_vec(),
            self.requires_grad(),
            vec![self.clone()],
            Op::Reshape,
        )
    }

    /// Columns `[start, end)` of the last axis.
    pub fn slice_last(&self, start: usize, end: usize) -> Tensor<S> {
        let s = self.shape();
        let d = *s.last().expect("slice_last on rank-0 tensor");
        assert!(
            start < end && end <= d,
            "slice_last: range {}..{} invalid for last axis of extent {} (shape {:?})",
            start,
            end,
            d,
            s
        );
        let width = end - start;
        let rows = self.numel() / d;
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&self.data()[r * d + start..r * d + end]);
        }
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = width;
        Tensor::new_node(
            shape,
            out,
            self.requires_grad(),
            vec![self.clone()],
            Op::SliceLast(start, end),
        )
    }

    /// Concatenates along the last axis. All leading axes must agree.
    pub fn concat_last(parts: &[Tensor<S>]) -> Tensor<S> {
        assert!(!parts.is_empty(), "concat_last: no inputs");
        let lead = &parts[0].shape()[..parts[0].shape().len() - 1];
        for p in parts {
            assert!(
                p.shape().len() == lead.len() + 1 && &p.shape()[..lead.len()] == lead,
                "concat_last: shape {:?} does not share leading axes {:?}",
                p.shape(),
                lead
            );
        }
        let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let rows = numel_of(lead);
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = parts.iter().any(|p| p.requires_grad());
        Tensor::new_node(shape, out, rg, parts.to_vec(), Op::ConcatLast)
    }

    /// Stacks k same-shape tensors into a new leading axis of extent k.
    pub fn stack(parts: &[Tensor<S>]) -> Tensor<S> {
        assert!(!parts.is_empty(), "stack: no inputs");
        let inner = parts[0].shape().to_vec();
        for p in parts {
            require_same("stack", p.shape(), &inner);
        }
        let mut out = Vec::with_capacity(parts.len() * parts[0].numel());
        for p in parts {
            out.extend_from_slice(p.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner);
        let rg = parts.iter().any(|p| p.requires_grad());
        Tensor::new_node(shape, out, rg, parts.to_vec(), Op::Stack)
    }

    /// Gathers rows of axis 0 in the given order (repeats allowed).
    pub fn select_rows(&self, rows: &[usize]) -> Tensor<S> {
        let s = self.shape();
        assert!(!s.is_empty(), "select_rows on rank-0 tensor");
        let n = s[0];
        let rowlen = self.numel() / n.max(1);
        for &r in rows {
            assert!(r < n, "select_rows: row {} out of bounds for axis 0 of extent {}", r, n);
        }
        let mut out = Vec::with_capacity(rows.len() * rowlen);
        for &r in rows {
            out.extend_from_slice(&self.data()[r * rowlen..(r + 1) * rowlen]);
        }
        let mut shape = s.to_vec();
        shape[0] = rows.len();
        Tensor::new_node(
            shape,
            out,
            self.requires_grad(),
            vec![self.clone()],
            Op::SelectRows(rows.to_vec()),
        )
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Tensor<S> {
        let mut acc = S::zero();
        for &v in self.data() {
            acc += v;
        }
        Tensor::new_node(vec![1], vec![acc], self.requires_grad(), vec![self.clone()], Op::Sum)
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&self) -> Tensor<S> {
        assert!(self.numel() > 0, "mean of empty tensor");
        let mut acc = S::zero();
        for &v in self.data() {
            acc += v;
        }
        let m = acc / S::from_f(self.numel() as f64);
        Tensor::new_node(vec![1], vec![m], self.requires_grad(), vec![self.clone()], Op::Mean)
    }

    /// Softmax over the last axis, numerically stabilized by the row max.
    pub fn softmax_rows(&self) -> Tensor<S> {
        let cols = *self.shape().last().expect("softmax_rows on rank-0 tensor");
        let maxes = row_max(self.data(), cols);
        let mut out = vec![S::zero(); self.numel()];
        for (r, row) in self.data().chunks_exact(cols).enumerate() {
            let m = maxes[r];
            let dst = &mut out[r * cols..(r + 1) * cols];
            for (j, &x) in row.iter().enumerate() {
                dst[j] = (x - m).exp();
            }
            let mut s = S::zero();
            for &e in dst.iter() {
                s += e;
            }
            for e in dst.iter_mut() {
                *e = *e / s;
            }
        }
        Tensor::new_node(
            self.shape().to_vec(),
            out,
            self.requires_grad(),
            vec![self.clone()],
            Op::SoftmaxRows,
        )
    }

    /// Divides each row (last axis) by its sum. Inputs are expected
    /// nonnegative with at least one strictly positive entry per row.
    pub fn normalize_rows(&self) -> Tensor<S> {
        let cols = *self.shape().last().expect("normalize_rows on rank-0 tensor");
        let mut out = vec![S::zero(); self.numel()];
        for (r, row) in self.data().chunks_exact(cols).enumerate() {
            let mut s = S::zero();
            for &v in row {
                s += v;
            }
            debug_assert!(s > S::zero(), "normalize_rows: row {} sums to {}", r, s);
            let dst = &mut out[r * cols..(r + 1) * cols];
            for (j, &v) in row.iter().enumerate() {
                dst[j] = v / s;
            }
        }
        Tensor::new_node(
            self.shape().to_vec(),
            out,
            self.requires_grad(),
            vec![self.clone()],
            Op::NormalizeRows,
        )
    }

    /// Layer normalization over the last axis with per-channel affine
    /// parameters, biased variance, and the usual epsilon inside the root.
    pub fn layer_norm(&self, gamma: &Tensor<S>, beta: &Tensor<S>, eps: f64) -> Tensor<S> {
        let d = *self.shape().last().expect("layer_norm on rank-0 tensor");
        assert!(
            gamma.shape() == [d] && beta.shape() == [d],
            "layer_norm: gamma {:?} / beta {:?} must both be [{}] for input {:?}",
            gamma.shape(),
            beta.shape(),
            d,
            self.shape()
        );
        let e = S::from_f(eps);
        let dn = S::from_f(d as f64);
        let mut out = vec![S::zero(); self.numel()];
        for (r, row) in self.data().chunks_exact(d).enumerate() {
            let mut mu = S::zero();
            for &v in row {
                mu += v;
            }
            mu = mu / dn;
            let mut var = S::zero();
            for &v in row {
                let c = v - mu;
                var += c * c;
            }
            var = var / dn;
            let inv = (var + e).sqrt().recip();
            let dst = &mut out[r * d..(r + 1) * d];
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mu) * inv;
                dst[j] = gamma.data()[j] * xh + beta.data()[j];
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Tensor::new_node(
            self.shape().to_vec(),
            out,
            rg,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Op::LayerNorm(e),
        )
    }

    /// Multiplies features `[n, p, d]` by a per-query channel mask `[n, d]`,
    /// broadcast over the middle (spatial) axis.
    pub fn scale_channels(&self, mask: &Tensor<S>) -> Tensor<S> {
        let s = self.shape();
        assert!(
            s.len() == 3 && mask.shape() == [s[0], s[2]],
            "scale_channels: features {:?} need mask [{}, {}], got {:?}",
            s,
            s[0],
            s[2],
            mask.shape()
        );
        let (n, p, d) = (s[0], s[1], s[2]);
        let mut out = vec![S::zero(); self.numel()];
        for i in 0..n {
            for q in 0..p {
                let base = (i * p + q) * d;
                for j in 0..d {
                    out[base + j] = self.data()[base + j] * mask.data()[i * d + j];
                }
            }
        }
        let rg = self.requires_grad() || mask.requires_grad();
        Tensor::new_node(
            s.to_vec(),
            out,
            rg,
            vec![self.clone(), mask.clone()],
            Op::ScaleChannels,
        )
    }

    /// Pools query regions out of a feature map `[c, h, w]` according to a
    /// prebuilt bilinear sampling plan; output is `[queries, bins, c]`.
    pub(crate) fn roi_align_with_plan(fm: &Tensor<S>, plan: RoiPlan) -> Tensor<S> {
        let s = fm.shape();
        assert!(
            s.len() == 3 && s[0] == plan.channels && s[1] == plan.fm_h && s[2] == plan.fm_w,
            "roi_align: feature map {:?} does not match plan ({}, {}, {})",
            s,
            plan.channels,
            plan.fm_h,
            plan.fm_w
        );
        let (nq, bins, c) = (plan.queries, plan.bins, plan.channels);
        let (h, w) = (plan.fm_h, plan.fm_w);
        let mut out = vec![S::zero(); nq * bins * c];
        for q in 0..nq {
            for b in 0..bins {
                let taps = &plan.taps[(q * bins + b) * plan.group..(q * bins + b + 1) * plan.group];
                for ch in 0..c {
                    let mut acc = S::zero();
                    for t in taps {
                        let v = fm.data()[ch * h * w + t.iy as usize * w + t.ix as usize];
                        acc += v * S::from_f(t.w);
                    }
                    out[(q * bins + b) * c + ch] = acc;
                }
            }
        }
        Tensor::new_node(
            vec![nq, bins, c],
            out,
            fm.requires_grad(),
            vec![fm.clone()],
            Op::RoiAlign(plan),
        )
    }
}

fn sigmoid_stable<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        (S::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn softplus_stable<S: Scalar>(x: S) -> S {
    let zero = S::zero();
    let lin = if x > zero { x } else { zero };
    lin + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid_val<S: Scalar>(x: S) -> S {
    sigmoid_stable(x)
}

pub(crate) fn softplus_val<S: Scalar>(x: S) -> S {
    softplus_stable(x)
}

pub(crate) fn matmul_into<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() == m * k && b.len() == k * n && out.len() == m * n);
    for i in 0..m {
        for j in 0..n {
            let mut acc = S::zero();
            for t in 0..k {
                acc += a[i * k + t] * b[t * n + j];
            }
            out[i * n + j] = acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;

    #[test]
    fn softmax_hand_value() {
        let x = Tensor::<f64>::constant(&[2], vec![0.0, std::f64::consts::LN_2]);
        let y = x.softmax_rows();
        let want = [1.0 / 3.0, 2.0 / 3.0];
        for (g, w) in y.data().iter().zip(want) {
            assert!((g - w).abs() < 1e-15, "softmax([0, ln2]) gave {:?}", y.data());
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut vals = Vec::new();
        for i in 0..60 {
            vals.push(((i * 37) % 19) as f64 * 7.3 - 50.0);
        }
        let x = Tensor::<f64>::constant(&[5, 12], vals);
        let y = x.softmax_rows();
        for r in 0..5 {
            let s: f64 = y.data()[r * 12..(r + 1) * 12].iter().sum();
            assert!(
                (s - 1.0).abs() < 1e-12,
                "softmax row {} sums to {} (off by {})",
                r,
                s,
                (s - 1.0).abs()
            );
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = Tensor::<f64>::constant(&[1, 4], vec![0.3, -1.2, 2.4, 0.0]);
        let shifted = x.add_scalar(123.75);
        let a = x.softmax_rows();
        let b = shifted.softmax_rows();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!(
                (u - v).abs() < 1e-12,
                "softmax changed under constant shift: {} vs {}",
                u,
                v
            );
        }
    }

    #[test]
    fn softmax_extreme_logits_stay_finite() {
        let x = Tensor::<f64>::constant(&[1, 3], vec![1e4, -1e4, 0.0]);
        let y = x.softmax_rows();
        assert!(y.data().iter().all(|v| v.is_finite()), "overflowed: {:?}", y.data());
        assert!((y.data()[0] - 1.0).abs() < 1e-12, "dominant logit should take all mass");
    }

    #[test]
    fn normalize_rows_matches_hand_value() {
        let x = Tensor::<f64>::constant(&[2, 2], vec![1.0, 3.0, 2.0, 2.0]);
        let y = x.normalize_rows();
        assert!(y.data() == &[0.25, 0.75, 0.5, 0.5], "got {:?}", y.data());
    }

    #[test]
    fn matmul_hand_value() {
        let a = Tensor::<f64>::constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::<f64>::constant(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert!(c.data() == &[58.0, 64.0, 139.0, 154.0], "got {:?}", c.data());
    }

    #[test]
    fn bmm_matches_per_batch_matmul() {
        let a = Tensor::<f64>::constant(&[2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let b = Tensor::<f64>::constant(&[2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 2.0]);
        let c = a.bmm(&b);
        assert!(
            c.data() == &[1.0, 2.0, 3.0, 4.0, 10.0, 12.0, 14.0, 16.0],
            "got {:?}",
            c.data()
        );
    }

    #[test]
    fn transpose_roundtrip() {
        let a = Tensor::<f64>::constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let t = a.transpose_last2();
        assert!(t.shape() == [3, 2]);
        assert!(t.data() == &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0], "got {:?}", t.data());
        let back = t.transpose_last2();
        assert!(back.data() == a.data(), "double transpose must restore data");
    }

    #[test]
    fn slice_concat_roundtrip() {
        let a = Tensor::<f64>::constant(&[2, 4], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let left = a.slice_last(0, 2);
        let right = a.slice_last(2, 4);
        let merged = Tensor::concat_last(&[left, right]);
        assert!(merged.data() == a.data(), "slice+concat must restore data");
    }

    #[test]
    fn layer_norm_zero_mean_unit_scale() {
        let x = Tensor::<f64>::constant(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let g = Tensor::<f64>::filled(&[4], 1.0);
        let b = Tensor::<f64>::zeros(&[4]);
        let y = x.layer_norm(&g, &b, 1e-5);
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12, "normalized mean {} not ~0", mean);
        assert!((var - 1.0).abs() < 1e-4, "normalized variance {} not ~1", var);
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        let x = Tensor::<f64>::constant(&[2], vec![800.0, -800.0]);
        let y = x.sigmoid();
        assert!((y.data()[0] - 1.0).abs() < 1e-15 && y.data()[1] < 1e-300);
        assert!(y.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softplus_large_inputs() {
        let x = Tensor::<f64>::constant(&[2], vec![1000.0, -1000.0]);
        let y = x.softplus();
        assert!((y.data()[0] - 1000.0).abs() < 1e-9, "softplus(1000) ~ 1000");
        assert!(y.data()[1] >= 0.0 && y.data()[1] < 1e-300, "softplus(-1000) ~ 0");
    }

    #[test]
    fn select_rows_repeats() {
        let a = Tensor::<f64>::constant(&[3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let s = a.select_rows(&[2, 0, 2]);
        assert!(s.data() == &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0], "got {:?}", s.data());
    }

    #[test]
    fn suffix_broadcast_bias_add() {
        let a = Tensor::<f64>::constant(&[2, 3], vec![0.0; 6]);
        let b = Tensor::<f64>::constant(&[3], vec![1.0, 2.0, 3.0]);
        let y = a.add(&b);
        assert!(y.data() == &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0], "got {:?}", y.data());
    }

    #[test]
    fn mismatched_shapes_panic_with_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2]);
        let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| a.add(&b)));
        let msg = *r.expect_err("must panic").downcast::<String>().expect("string panic");
        assert!(
            msg.contains("[2, 3]") && msg.contains("[2]"),
            "panic message should name both shapes, got: {}",
            msg
        );
    }
}
