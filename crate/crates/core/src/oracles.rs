//! Independent reference implementations used to validate the fast paths.
//!
//! Everything here favors obviousness over speed: counting loops, exhaustive
//! enumeration, dense sampling. The test suite and the built-in self check
//! compare the production code against these.

use crate::scalar::Scalar;

/// IoU by rasterization: overlays a grid of `res x res` cells per unit square
//  over the joint bounding window and counts cell centers inside each box.
/// Exact for boxes with integer coordinates (centers never straddle an
/// integer boundary); converges as O(1/res) otherwise.
pub fn raster_iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64), res: usize) -> f64 {
    let x0 = a.0.min(b.0).floor();
    let y0 = a.1.min(b.1).floor();
    let x1 = a.2.max(b.2).ceil();
    let y1 = a.3.max(b.3).ceil();
    let nx = ((x1 - x0) * res as f64).round() as usize;
    let ny = ((y1 - y0) * res as f64).round() as usize;
    let step = 1.0 / res as f64;
    let inside = |bx: (f64, f64, f64, f64), px: f64, py: f64| -> bool {
        px > bx.0 && px < bx.2 && py > bx.1 && py < bx.3
    };
    let (mut in_a, mut in_b, mut in_both) = (0u64, 0u64, 0u64);
    for iy in 0..ny {
        let py = y0 + (iy as f64 + 0.5) * step;
        for ix in 0..nx {
            let px = x0 + (ix as f64 + 0.5) * step;
            let ia = inside(a, px, py);
            let ib = inside(b, px, py);
            if ia {
                in_a += 1;
            }
            if ib {
                in_b += 1;
            }
            if ia && ib {
                in_both += 1;
            }
        }
    }
    let union = in_a + in_b - in_both;
    if union == 0 {
        0.0
    } else {
        in_both as f64 / union as f64
    }
}

/// Generic-scalar convenience wrapper around [`raster_iou`].
pub fn raster_iou_s<S: Scalar>(a: (S, S, S, S), b: (S, S, S, S), res: usize) -> f64 {
    raster_iou(
        (a.0.to_f(), a.1.to_f(), a.2.to_f(), a.3.to_f()),
        (b.0.to_f(), b.1.to_f(), b.2.to_f(), b.3.to_f()),
        res,
    )
}

/// Multi-head self attention by scalar loops, with an unstabilized softmax.
/// Inputs are row-major: `q` is `n x d`, `w_qkv` is `d x 3d`, `b_qkv` is
/// `3d`, `w_o` is `d x d`, `b_o` is `d`. Returns the `n x d` output.
#[allow(clippy::too_many_arguments)]
pub fn naive_msa(
    q: &[f64],
    w_qkv: &[f64],
    b_qkv: &[f64],
    w_o: &[f64],
    b_o: &[f64],
    n: usize,
    d: usize,
    heads: usize,
) -> Vec<f64> {
    assert!(d % heads == 0, "naive_msa: {} channels across {} heads", d, heads);
    let dh = d / heads;
    let mut qkv = vec![0.0; n * 3 * d];
    for i in 0..n {
        for j in 0..3 * d {
            let mut acc = b_qkv[j];
            for t in 0..d {
                acc += q[i * d + t] * w_qkv[t * 3 * d + j];
            }
            qkv[i * 3 * d + j] = acc;
        }
    }
    let at = |m: &Vec<f64>, i: usize, part: usize, c: usize| m[i * 3 * d + part * d + c];
    let mut concat = vec![0.0; n * d];
    for h in 0..heads {
        for i in 0..n {
            let mut weights = vec![0.0; n];
            let mut z = 0.0;
            for j in 0..n {
                let mut dot = 0.0;
                for c in 0..dh {
                    dot += at(&qkv, i, 0, h * dh + c) * at(&qkv, j, 1, h * dh + c);
                }
                let e = (dot / (dh as f64).sqrt()).exp();
                weights[j] = e;
                z += e;
            }
            for c in 0..dh {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += weights[j] / z * at(&qkv, j, 2, h * dh + c);
                }
                concat[i * d + h * dh + c] = acc;
            }
        }
    }
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            let mut acc = b_o[j];
            for t in 0..d {
                acc += concat[i * d + t] * w_o[t * d + j];
            }
            out[i * d + j] = acc;
        }
    }
    out
}

/// Bilinear lookup by snapping to a 100x-refined lattice and using explicit
/// opposite-rectangle area weights. The snap bounds the error by the local
/// slope times 0.005, so agreement with true bilinear interpolation is only
/// expected to within the oracle's own resolution.
pub fn snap_bilinear(ch: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let snap = |v: f64| (v * 100.0).round() / 100.0;
    let cx = snap(x).max(0.0).min((w - 1) as f64);
    let cy = snap(y).max(0.0).min((h - 1) as f64);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = cx - x0 as f64;
    let fy = cy - y0 as f64;
    let a00 = (1.0 - fy) * (1.0 - fx);
    let a01 = (1.0 - fy) * fx;
    let a10 = fy * (1.0 - fx);
    let a11 = fy * fx;
    ch[y0 * w + x0] * a00 + ch[y0 * w + x1] * a01 + ch[y1 * w + x0] * a10 + ch[y1 * w + x1] * a11
}

/// Region pooling of one channel by brute force: each of the `s x s` bins
/// averages `density x density` bilinear samples at regular interior
/// offsets. The rectangle is given in grid coordinates.
pub fn dense_roi_pool(
    ch: &[f64],
    h: usize,
    w: usize,
    rect: (f64, f64, f64, f64),
    s: usize,
    density: usize,
) -> Vec<f64> {
    let (gx1, gy1, gx2, gy2) = rect;
    let bw = (gx2 - gx1) / s as f64;
    let bh = (gy2 - gy1) / s as f64;
    let bilin = |x: f64, y: f64| -> f64 {
        let cx = x.max(0.0).min((w - 1) as f64);
        let cy = y.max(0.0).min((h - 1) as f64);
        let x0 = cx.floor() as usize;
        let y0 = cy.floor() as usize;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fx = cx - x0 as f64;
        let fy = cy - y0 as f64;
        ch[y0 * w + x0] * (1.0 - fy) * (1.0 - fx)
            + ch[y0 * w + x1] * (1.0 - fy) * fx
            + ch[y1 * w + x0] * fy * (1.0 - fx)
            + ch[y1 * w + x1] * fy * fx
    };
    let mut out = vec![0.0; s * s];
    for by in 0..s {
        for bx in 0..s {
            let mut acc = 0.0;
            for sy in 0..density {
                for sx in 0..density {
                    let gy = gy1 + (by as f64 + (sy as f64 + 0.5) / density as f64) * bh;
                    let gx = gx1 + (bx as f64 + (sx as f64 + 0.5) / density as f64) * bw;
                    acc += bilin(gx, gy);
                }
            }
            out[by * s + bx] = acc / (density * density) as f64;
        }
    }
    out
}

/// Minimum-cost injection of targets into predictions by exhaustive search.
/// `cost` is row-major `n x m` (prediction-major), `n >= m`. Vectors are
/// enumerated in lexicographic order of `(a_0, .., a_{m-1})` where `a_j` is
/// the prediction for target `j`, totals are summed left to right over
/// targets, and only strictly better totals replace the incumbent, so the
/// result is the lexicographically smallest optimal vector. Feasible only
/// for small `n` (the search visits n!/(n-m)! vectors).
pub fn brute_force_assignment(cost: &[f64], n: usize, m: usize) -> (Vec<usize>, f64) {
    assert!(cost.len() == n * m && n >= m, "brute force: bad instance");
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut picked = vec![usize::MAX; m];
    let mut used = vec![false; n];
    fn walk(
        cost: &[f64],
        n: usize,
        m: usize,
        j: usize,
        picked: &mut Vec<usize>,
        used: &mut Vec<bool>,
        best: &mut Option<(Vec<usize>, f64)>,
    ) {
        if j == m {
            let mut total = 0.0;
            for (t, &p) in picked.iter().enumerate() {
                total += cost[p * m + t];
            }
            if best.as_ref().map_or(true, |(_, b)| total < *b) {
                *best = Some((picked.clone(), total));
            }
            return;
        }
        for p in 0..n {
            if !used[p] {
                used[p] = true;
                picked[j] = p;
                walk(cost, n, m, j + 1, picked, used, best);
                used[p] = false;
            }
        }
    }
    walk(cost, n, m, 0, &mut picked, &mut used, &mut best);
    best.unwrap_or((Vec::new(), 0.0))
}
