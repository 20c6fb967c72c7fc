//! One-to-one assignment between predicted and ground-truth boxes, and the
//! composite set loss built on that assignment. Matching minimizes the same
//! weighted cost the loss charges (sigmoid focal on class logits, L1 on
//! image-normalized corners, generalized-IoU), so there is no separate
//! assignment heuristic and no non-maximum suppression anywhere.

use crate::error::{Error, Result};
use crate::geometry::{giou, BBox};
use crate::geometry::BoxSet;
use crate::scalar::Scalar;
use crate::tensor::{softplus_val, Tensor};

use serde::{Deserialize, Serialize};

/// Loss term weights and focal shape; matching cost uses the same values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostConfig {
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            lambda_cls: 2.0,
            lambda_l1: 5.0,
            lambda_giou: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

/// Ground truth for one scene: boxes plus one class id per box.
#[derive(Debug, Clone)]
pub struct Targets<S: Scalar> {
    pub boxes: BoxSet<S>,
    pub classes: Vec<usize>,
}

impl<S: Scalar> Targets<S> {
    pub fn new(boxes: BoxSet<S>, classes: Vec<usize>) -> Self {
        assert!(
            boxes.len() == classes.len(),
            "targets: {} boxes but {} class ids",
            boxes.len(),
            classes.len()
        );
        Targets { boxes, classes }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// One-to-one pairing chosen by the matcher. Pairs are
/// `(prediction index, target index)` in ascending target order, and the
/// total is the sum of matched cost entries in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub assignment: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Sigmoid focal term for a single logit, computed in log space:
/// `softplus(-l) = -log sigmoid(l)` and `exp(-gamma softplus(l)) =
/// (1 - sigmoid(l))^gamma`, so neither factor overflows or loses the tail.
pub fn focal_loss<S: Scalar>(logit: S, is_positive: bool, cfg: &CostConfig) -> S {
    let a = S::from_f(cfg.focal_alpha);
    let g = S::from_f(cfg.focal_gamma);
    if is_positive {
        a * (-(g * softplus_val(logit))).exp() * softplus_val(-logit)
    } else {
        (S::one() - a) * (-(g * softplus_val(-logit))).exp() * softplus_val(logit)
    }
}

/// Sum of absolute corner differences after normalizing both boxes by the
/// image size, so the weight on this term is image-scale free.
pub fn l1_box_loss<S: Scalar>(pred: &BBox<S>, gt: &BBox<S>, image_w: S, image_h: S) -> S {
    let dx1 = (pred.x1 / image_w - gt.x1 / image_w).abs();
    let dy1 = (pred.y1 / image_h - gt.y1 / image_h).abs();
    let dx2 = (pred.x2 / image_w - gt.x2 / image_w).abs();
    let dy2 = (pred.y2 / image_h - gt.y2 / image_h).abs();
    dx1 + dy1 + dx2 + dy2
}

/// `1 - giou`, in `[0, 2]`. Boxes are expected in a common normalized frame.
pub fn giou_loss<S: Scalar>(pred: &BBox<S>, gt: &BBox<S>) -> S {
    S::one() - giou(pred, gt)
}

fn row_box<S: Scalar>(boxes: &Tensor<S>, i: usize) -> BBox<S> {
    BBox::new(
        boxes.at(&[i, 0]),
        boxes.at(&[i, 1]),
        boxes.at(&[i, 2]),
        boxes.at(&[i, 3]),
    )
}

/// Plain (constant) `[n, m]` cost matrix: each entry charges the candidate
/// class logit with the difference of its positive and negative focal terms
/// plus the two weighted box distances against that target.
pub fn cost_matrix<S: Scalar>(
    class_logits: &Tensor<S>,
    boxes: &Tensor<S>,
    targets: &Targets<S>,
    cfg: &CostConfig,
) -> Tensor<S> {
    let (n, c) = (class_logits.shape()[0], class_logits.shape()[1]);
    assert!(
        boxes.shape() == [n, 4],
        "cost matrix: boxes {:?} must be [{}, 4]",
        boxes.shape(),
        n
    );
    let m = targets.len();
    let (w, h) = (targets.boxes.image_w, targets.boxes.image_h);
    let norm = |b: &BBox<S>| BBox::new(b.x1 / w, b.y1 / h, b.x2 / w, b.y2 / h);
    let gt_n: Vec<BBox<S>> = targets.boxes.boxes.iter().map(&norm).collect();
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let pb = row_box(boxes, i);
        let pb_n = norm(&pb);
        for j in 0..m {
            let cls_id = targets.classes[j];
            assert!(cls_id < c, "cost matrix: class id {} exceeds {} classes", cls_id, c);
            let l = class_logits.at(&[i, cls_id]);
            let cls = focal_loss(l, true, cfg) - focal_loss(l, false, cfg);
            let l1 = l1_box_loss(&pb, &targets.boxes.boxes[j], w, h);
            let gi = giou_loss(&pb_n, &gt_n[j]);
            out.push(
                S::from_f(cfg.lambda_cls) * cls
                    + S::from_f(cfg.lambda_l1) * l1
                    + S::from_f(cfg.lambda_giou) * gi,
            );
        }
    }
    Tensor::constant(&[n, m], out)
}

/// Shortest-augmenting-path assignment on a rectangular `n x m` cost matrix
/// (`n >= m`, prediction-major). Returns `a[j] =` prediction for target `j`.
/// Scan order is fixed and ascending, so the result is deterministic.
fn solve_rect(cost: &[f64], n: usize, m: usize) -> Vec<usize> {
    debug_assert!(cost.len() == n * m && n >= m);
    let mut u = vec![0.0f64; m];
    let mut v = vec![0.0f64; n + 1];
    // matched[j] = target occupying prediction j; index n is the virtual
    // start column of each augmentation.
    let mut matched = vec![usize::MAX; n + 1];
    let mut way = vec![0usize; n + 1];
    for t in 0..m {
        matched[n] = t;
        let mut j0 = n;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let t0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = usize::MAX;
            for j in 0..n {
                if !used[j] {
                    let cur = cost[j * m + t0] - u[t0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            debug_assert!(j1 != usize::MAX, "augmentation ran out of predictions");
            for j in 0..=n {
                if used[j] {
                    if matched[j] != usize::MAX {
                        u[matched[j]] += delta;
                    }
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == usize::MAX {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == n {
                break;
            }
        }
    }
    let mut a = vec![usize::MAX; m];
    for j in 0..n {
        if matched[j] != usize::MAX {
            a[matched[j]] = j;
        }
    }
    a
}

/// Total of an assignment vector, summed left to right over targets. All
/// optimality and tie comparisons use this one canonical order.
fn vector_total(cost: &[f64], m: usize, a: &[usize]) -> f64 {
    let mut total = 0.0;
    for (j, &p) in a.iter().enumerate() {
        total += cost[p * m + j];
    }
    total
}

/// Optimal completion of a fixed prefix: targets `0..prefix.len()` keep
/// their predictions, the rest are solved over the unused predictions.
fn complete_prefix(cost: &[f64], n: usize, m: usize, prefix: &[usize]) -> Vec<usize> {
    let k = prefix.len();
    if k == m {
        return prefix.to_vec();
    }
    let free: Vec<usize> = (0..n).filter(|p| !prefix.contains(p)).collect();
    let (fn_, fm) = (free.len(), m - k);
    let mut sub = Vec::with_capacity(fn_ * fm);
    for &p in &free {
        for j in k..m {
            sub.push(cost[p * m + j]);
        }
    }
    let sub_a = solve_rect(&sub, fn_, fm);
    let mut full = prefix.to_vec();
    full.extend(sub_a.iter().map(|&pi| free[pi]));
    full
}

/// Minimum-cost one-to-one assignment of every target to a distinct
/// prediction. Among equal-cost optima the lexicographically smallest
/// vector of prediction indices (in target order) is returned, found by
/// fixing targets left to right with the cheapest prediction whose forced
/// completion still reaches the optimal total.
pub fn hungarian<S: Scalar>(cost: &Tensor<S>) -> Result<MatchResult> {
    let s = cost.shape();
    assert!(s.len() == 2, "hungarian: cost must be a matrix, got {:?}", s);
    let (n, m) = (s[0], s[1]);
    assert!(n >= m, "hungarian: {} targets exceed {} predictions", m, n);
    if m == 0 {
        return Ok(MatchResult {
            assignment: Vec::new(),
            total_cost: 0.0,
        });
    }
    let c: Vec<f64> = cost.data().iter().map(|v| v.to_f()).collect();
    if let Some(bad) = c.iter().position(|v| !v.is_finite()) {
        return Err(Error::Input(format!(
            "hungarian: non-finite cost {} at entry ({}, {})",
            c[bad],
            bad / m,
            bad % m
        )));
    }
    let base = solve_rect(&c, n, m);
    let mut t_star = vector_total(&c, m, &base);
    let mut chosen: Vec<usize> = Vec::with_capacity(m);
    for j in 0..m {
        let mut fixed = None;
        for p in 0..n {
            if chosen.contains(&p) {
                continue;
            }
            chosen.push(p);
            let full = complete_prefix(&c, n, m, &chosen);
            chosen.pop();
            if vector_total(&c, m, &full) == t_star {
                fixed = Some(p);
                break;
            }
        }
        match fixed {
            Some(p) => chosen.push(p),
            None => {
                // Unreachable barring float pathologies in the equality
                // test; fall back to the best completion from here.
                let full = complete_prefix(&c, n, m, &chosen);
                t_star = vector_total(&c, m, &full);
                chosen.push(full[j]);
            }
        }
    }
    let total_cost = vector_total(&c, m, &chosen);
    Ok(MatchResult {
        assignment: chosen.into_iter().enumerate().map(|(j, p)| (p, j)).collect(),
        total_cost,
    })
}

/// Per-pair `1 - giou` on corner tensors `[k, 4]`, differentiable in the
/// first argument; intersection width and height floor at zero through relu.
fn giou_loss_rows<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let col = |t: &Tensor<S>, i: usize| t.slice_last(i, i + 1);
    let (ax1, ay1, ax2, ay2) = (col(a, 0), col(a, 1), col(a, 2), col(a, 3));
    let (bx1, by1, bx2, by2) = (col(b, 0), col(b, 1), col(b, 2), col(b, 3));
    let iw = ax2.minimum(&bx2).sub(&ax1.maximum(&bx1)).relu();
    let ih = ay2.minimum(&by2).sub(&ay1.maximum(&by1)).relu();
    let inter = iw.mul(&ih);
    let area_a = ax2.sub(&ax1).mul(&ay2.sub(&ay1));
    let area_b = bx2.sub(&bx1).mul(&by2.sub(&by1));
    let uni = area_a.add(&area_b).sub(&inter);
    let hull = bx2
        .maximum(&ax2)
        .sub(&bx1.minimum(&ax1))
        .mul(&by2.maximum(&ay2).sub(&by1.minimum(&ay1)));
    let g = inter.div(&uni).sub(&hull.sub(&uni).div(&hull));
    Tensor::filled(&[a.shape()[0], 1], S::one()).sub(&g)
}

fn stage_loss<S: Scalar>(
    class_logits: &Tensor<S>,
    boxes: &Tensor<S>,
    targets: &Targets<S>,
    matches: &[(usize, usize)],
    cfg: &CostConfig,
) -> Tensor<S> {
    let (n, c) = (class_logits.shape()[0], class_logits.shape()[1]);
    let m = targets.len();
    let norm = 1.0 / m.max(1) as f64;

    let mut pos = vec![S::zero(); n * c];
    for &(p, t) in matches {
        pos[p * c + targets.classes[t]] = S::one();
    }
    let pos_t = Tensor::constant(&[n, c], pos.clone());
    let neg_t = Tensor::constant(
        &[n, c],
        pos.iter().map(|&v| S::one() - v).collect::<Vec<S>>(),
    );
    let g = cfg.focal_gamma;
    let fpos = class_logits
        .softplus()
        .mul_scalar(-g)
        .exp()
        .mul(&class_logits.neg().softplus())
        .mul_scalar(cfg.focal_alpha);
    let fneg = class_logits
        .neg()
        .softplus()
        .mul_scalar(-g)
        .exp()
        .mul(&class_logits.softplus())
        .mul_scalar(1.0 - cfg.focal_alpha);
    let l_cls = fpos
        .mul(&pos_t)
        .add(&fneg.mul(&neg_t))
        .sum()
        .mul_scalar(norm);
    let mut total = l_cls.mul_scalar(cfg.lambda_cls);

    if !matches.is_empty() {
        let (w, h) = (
            targets.boxes.image_w.to_f(),
            targets.boxes.image_h.to_f(),
        );
        let inv_frame = Tensor::constant(
            &[4],
            vec![
                S::from_f(1.0 / w),
                S::from_f(1.0 / h),
                S::from_f(1.0 / w),
                S::from_f(1.0 / h),
            ],
        );
        let rows: Vec<usize> = matches.iter().map(|&(p, _)| p).collect();
        let pred_n = boxes.select_rows(&rows).mul(&inv_frame);
        let mut gt = Vec::with_capacity(matches.len() * 4);
        for &(_, t) in matches {
            let b = &targets.boxes.boxes[t];
            gt.push(b.x1 / targets.boxes.image_w);
            gt.push(b.y1 / targets.boxes.image_h);
            gt.push(b.x2 / targets.boxes.image_w);
            gt.push(b.y2 / targets.boxes.image_h);
        }
        let gt = Tensor::constant(&[matches.len(), 4], gt);
        let l_l1 = pred_n.sub(&gt).abs_val().sum().mul_scalar(norm);
        let l_giou = giou_loss_rows(&pred_n, &gt).sum().mul_scalar(norm);
        total = total
            .add(&l_l1.mul_scalar(cfg.lambda_l1))
            .add(&l_giou.mul_scalar(cfg.lambda_giou));
    }
    total
}

/// Composite loss over cascade stages with the pairing supplied explicitly,
/// one pair list per stage. The pairing enters only through constant masks
/// and row selections, so gradients see it as fixed.
pub fn set_loss_with_matches<S: Scalar>(
    stages: &[(Tensor<S>, Tensor<S>)],
    targets: &Targets<S>,
    matches: &[Vec<(usize, usize)>],
    cfg: &CostConfig,
) -> Tensor<S> {
    assert!(
        stages.len() == matches.len(),
        "set loss: {} stages but {} match lists",
        stages.len(),
        matches.len()
    );
    let mut total: Option<Tensor<S>> = None;
    for ((logits, boxes), pairs) in stages.iter().zip(matches) {
        let l = stage_loss(logits, boxes, targets, pairs, cfg);
        total = Some(match total {
            Some(t) => t.add(&l),
            None => l,
        });
    }
    total.expect("set loss: no stages")
}

/// Composite loss over cascade stages: each stage is matched independently
/// against the targets with [`hungarian`] on its own cost matrix, matched
/// pairs contribute all three terms, unmatched slots contribute the negative
/// focal term, and stage losses are summed. Box and class sums are divided
/// by the target count (at least 1). With no targets every slot is charged
/// as a negative.
pub fn set_loss<S: Scalar>(
    stages: &[(Tensor<S>, Tensor<S>)],
    targets: &Targets<S>,
    cfg: &CostConfig,
) -> Result<Tensor<S>> {
    let mut all = Vec::with_capacity(stages.len());
    for (logits, boxes) in stages {
        if targets.is_empty() {
            all.push(Vec::new());
        } else {
            let cm = cost_matrix(logits, boxes, targets, cfg);
            all.push(hungarian(&cm)?.assignment);
        }
    }
    Ok(set_loss_with_matches(stages, targets, &all, cfg))
}
