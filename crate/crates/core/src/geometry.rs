//! Axis-aligned box algebra: IoU, GIoU, the pairwise IoU matrix that weights
//! attention, and center-size delta decoding for per-stage box refinement.
//!
//! Boxes are stored corner-form `(x1, y1, x2, y2)` in pixel coordinates;
//! refinement deltas use center-size form `(dx, dy, dw, dh)` with the log
//! terms clamped to ±4 before exponentiation. Degenerate (zero-area) boxes
//! have IoU 0 against everything, themselves included, and GIoU of two
//! degenerate boxes is 0; both functions are total.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Largest magnitude allowed for the log-scale terms of a box delta.
pub const DELTA_LOG_CLAMP: f64 = 4.0;

/// Axis-aligned box, corner form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox<S: Scalar> {
    pub x1: S,
    pub y1: S,
    pub x2: S,
    pub y2: S,
}

impl<S: Scalar> BBox<S> {
    pub fn new(x1: S, y1: S, x2: S, y2: S) -> Self {
        BBox { x1, y1, x2, y2 }.normalized()
    }

    /// Swaps coordinates so `x1 <= x2` and `y1 <= y2`.
    pub fn normalized(self) -> Self {
        let (x1, x2) = if self.x1 <= self.x2 {
            (self.x1, self.x2)
        } else {
            (self.x2, self.x1)
        };
        let (y1, y2) = if self.y1 <= self.y2 {
            (self.y1, self.y2)
        } else {
            (self.y2, self.y1)
        };
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> S {
        self.x2 - self.x1
    }

    pub fn height(&self) -> S {
        self.y2 - self.y1
    }

    pub fn area(&self) -> S {
        self.width() * self.height()
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.area() > S::zero())
    }

    /// Center-size view `(cx, cy, w, h)`.
    pub fn to_center_size(&self) -> (S, S, S, S) {
        let two = S::from_f(2.0);
        (
            (self.x1 + self.x2) / two,
            (self.y1 + self.y2) / two,
            self.width(),
            self.height(),
        )
    }

    pub fn from_center_size(cx: S, cy: S, w: S, h: S) -> Self {
        let half_w = w / S::from_f(2.0);
        let half_h = h / S::from_f(2.0);
        BBox {
            x1: cx - half_w,
            y1: cy - half_h,
            x2: cx + half_w,
            y2: cy + half_h,
        }
        .normalized()
    }

    /// Clamps all coordinates into `[0, w] x [0, h]`.
    pub fn clamped_to(&self, w: S, h: S) -> Self {
        let cl = |v: S, hi: S| {
            if v < S::zero() {
                S::zero()
            } else if v > hi {
                hi
            } else {
                v
            }
        };
        BBox {
            x1: cl(self.x1, w),
            y1: cl(self.y1, h),
            x2: cl(self.x2, w),
            y2: cl(self.y2, h),
        }
        .normalized()
    }

    pub fn tuple(&self) -> (S, S, S, S) {
        (self.x1, self.y1, self.x2, self.y2)
    }
}

/// Intersection over union. 0 when the union has zero area.
pub fn iou<S: Scalar>(a: &BBox<S>, b: &BBox<S>) -> S {
    if a.is_degenerate() || b.is_degenerate() {
        return S::zero();
    }
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(S::zero());
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(S::zero());
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union > S::zero() {
        inter / union
    } else {
        S::zero()
    }
}

/// Generalized IoU: `iou - (|C| - |A u B|) / |C|` with C the smallest
/// enclosing box. 0 when both boxes are degenerate.
pub fn giou<S: Scalar>(a: &BBox<S>, b: &BBox<S>) -> S {
    if a.is_degenerate() && b.is_degenerate() {
        return S::zero();
    }
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(S::zero());
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(S::zero());
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    let i = if union > S::zero() { inter / union } else { S::zero() };
    let cw = a.x2.max(b.x2) - a.x1.min(b.x1);
    let ch = a.y2.max(b.y2) - a.y1.min(b.y1);
    let c = cw * ch;
    if c > S::zero() {
        i - (c - union) / c
    } else {
        i
    }
}

/// Ordered list of boxes tied to an image frame. Construction clamps every
/// box into the frame.
#[derive(Debug, Clone)]
pub struct BoxSet<S: Scalar> {
    pub boxes: Vec<BBox<S>>,
    pub image_w: S,
    pub image_h: S,
}

impl<S: Scalar> BoxSet<S> {
    pub fn new(image_w: S, image_h: S, boxes: Vec<BBox<S>>) -> Self {
        assert!(
            image_w > S::zero() && image_h > S::zero(),
            "BoxSet: image dimensions must be positive, got {} x {}",
            image_w,
            image_h
        );
        let boxes = boxes
            .into_iter()
            .map(|b| b.clamped_to(image_w, image_h))
            .collect();
        BoxSet {
            boxes,
            image_w,
            image_h,
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// CSV with a one-line header; `classes`, when given, must be parallel to
    /// the boxes and adds a `class_id` column.
    pub fn to_csv(&self, classes: Option<&[usize]>) -> String {
        if let Some(c) = classes {
            assert!(
                c.len() == self.boxes.len(),
                "to_csv: {} classes for {} boxes",
                c.len(),
                self.boxes.len()
            );
        }
        let mut out = String::new();
        out.push_str(if classes.is_some() {
            "x1,y1,x2,y2,class_id\n"
        } else {
            "x1,y1,x2,y2\n"
        });
        for (i, b) in self.boxes.iter().enumerate() {
            out.push_str(&format!("{},{},{},{}", b.x1, b.y1, b.x2, b.y2));
            if let Some(c) = classes {
                out.push_str(&format!(",{}", c[i]));
            }
            out.push('\n');
        }
        out
    }

    /// Parses the CSV form; rows may uniformly carry an optional class
    /// column. Boxes are clamped into the given frame.
    pub fn from_csv(text: &str, image_w: S, image_h: S) -> Result<(Self, Option<Vec<usize>>)> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Parse("box CSV: empty input, expected a header line".into()))?;
        let with_class = match header.trim() {
            "x1,y1,x2,y2" => false,
            "x1,y1,x2,y2,class_id" => true,
            other => {
                return Err(Error::Parse(format!(
                    "box CSV: unrecognized header {:?}",
                    other
                )))
            }
        };
        let mut boxes = Vec::new();
        let mut classes = Vec::new();
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(|f| f.trim()).collect();
            let want = if with_class { 5 } else { 4 };
            if fields.len() != want {
                return Err(Error::Parse(format!(
                    "box CSV line {}: expected {} fields, got {}",
                    lineno + 1,
                    want,
                    fields.len()
                )));
            }
            let mut nums = [0.0f64; 4];
            for (k, f) in fields[..4].iter().enumerate() {
                nums[k] = f.parse::<f64>().map_err(|_| {
                    Error::Parse(format!(
                        "box CSV line {}: field {:?} is not a number",
                        lineno + 1,
                        f
                    ))
                })?;
                if !nums[k].is_finite() {
                    return Err(Error::Parse(format!(
                        "box CSV line {}: non-finite coordinate {}",
                        lineno + 1,
                        nums[k]
                    )));
                }
            }
            if with_class {
                classes.push(fields[4].parse::<usize>().map_err(|_| {
                    Error::Parse(format!(
                        "box CSV line {}: class id {:?} is not a nonnegative integer",
                        lineno + 1,
                        fields[4]
                    ))
                })?);
            }
            boxes.push(BBox::new(
                S::from_f(nums[0]),
                S::from_f(nums[1]),
                S::from_f(nums[2]),
                S::from_f(nums[3]),
            ));
        }
        let set = BoxSet::new(image_w, image_h, boxes);
        Ok((set, if with_class { Some(classes) } else { None }))
    }
}

/// N x N IoU matrix of a box set against itself, as a constant tensor.
/// Attention treats this as data: no gradient flows into box coordinates.
pub fn pairwise_iou<S: Scalar>(s: &BoxSet<S>) -> Tensor<S> {
    let n = s.len();
    assert!(n >= 1, "pairwise_iou: empty box set");
    let mut data = vec![S::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            data[i * n + j] = iou(&s.boxes[i], &s.boxes[j]);
        }
    }
    Tensor::constant(&[n, n], data)
}

/// Decodes a center-size delta against a box, clamps the log terms to ±4,
/// then clamps the result into the image frame.
pub fn apply_deltas<S: Scalar>(
    b: &BBox<S>,
    deltas: (S, S, S, S),
    image_w: S,
    image_h: S,
) -> BBox<S> {
    let (cx, cy, w, h) = b.to_center_size();
    let lim = S::from_f(DELTA_LOG_CLAMP);
    let cl = |v: S| v.max(-lim).min(lim);
    let ncx = cx + deltas.0 * w;
    let ncy = cy + deltas.1 * h;
    let nw = w * cl(deltas.2).exp();
    let nh = h * cl(deltas.3).exp();
    BBox::from_center_size(ncx, ncy, nw, nh).clamped_to(image_w, image_h)
}

/// Inverse of [`apply_deltas`] ignoring the clamps: the delta that maps
/// `from` onto `to`. Both boxes must be non-degenerate.
pub fn encode_deltas<S: Scalar>(from: &BBox<S>, to: &BBox<S>) -> (S, S, S, S) {
    assert!(
        !from.is_degenerate() && !to.is_degenerate(),
        "encode_deltas: degenerate box ({:?} -> {:?})",
        from.tuple(),
        to.tuple()
    );
    let (fcx, fcy, fw, fh) = from.to_center_size();
    let (tcx, tcy, tw, th) = to.to_center_size();
    (
        (tcx - fcx) / fw,
        (tcy - fcy) / fh,
        (tw / fw).ln(),
        (th / fh).ln(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::raster_iou;
    use crate::rng::Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox<f64> {
        BBox::new(x1, y1, x2, y2)
    }

    #[test]
    fn iou_identical_boxes_is_exactly_one() {
        let b = bx(0.0, 0.0, 2.0, 2.0);
        assert!(iou(&b, &b) == 1.0, "self IoU must be exactly 1.0");
        let odd = bx(0.3, 1.7, 5.9, 2.9);
        assert!(iou(&odd, &odd) == 1.0, "self IoU must be exactly 1.0 for any box");
    }

    #[test]
    fn iou_disjoint_is_zero() {
        assert!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(2.0, 2.0, 3.0, 3.0)) == 0.0);
    }

    #[test]
    fn iou_overlap_matches_rasterization_oracle() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        let b = bx(1.0, 1.0, 3.0, 3.0);
        let got = iou(&a, &b);
        let want = 1.0 / 7.0;
        assert!((got - want).abs() < 1e-15, "IoU {} != 1/7", got);
        let oracle = raster_iou(a.tuple(), b.tuple(), 32);
        assert!((got - oracle).abs() < 1e-12, "IoU {} disagrees with raster {}", got, oracle);
    }

    #[test]
    fn iou_random_integer_boxes_match_oracle() {
        let mut rng = Rng::new(11);
        let span = |rng: &mut Rng| {
            let lo = rng.int_in(0, 6);
            let hi = lo + rng.int_in(1, 8 - lo);
            (lo as f64, hi as f64)
        };
        for _ in 0..100 {
            let (x1, x2) = span(&mut rng);
            let (y1, y2) = span(&mut rng);
            let (u1, u2) = span(&mut rng);
            let (v1, v2) = span(&mut rng);
            let a = bx(x1, y1, x2, y2);
            let b = bx(u1, v1, u2, v2);
            let got = iou(&a, &b);
            let want = raster_iou(a.tuple(), b.tuple(), 16);
            assert!(
                (got - want).abs() < 1e-12,
                "IoU {} vs raster {} for {:?} {:?}",
                got,
                want,
                a.tuple(),
                b.tuple()
            );
        }
    }

    #[test]
    fn iou_symmetry_and_range() {
        let mut rng = Rng::new(21);
        for _ in 0..200 {
            let a = bx(
                rng.uniform(0.0, 8.0),
                rng.uniform(0.0, 8.0),
                rng.uniform(0.0, 8.0),
                rng.uniform(0.0, 8.0),
            );
            let b = bx(
                rng.uniform(0.0, 8.0),
                rng.uniform(0.0, 8.0),
                rng.uniform(0.0, 8.0),
                rng.uniform(0.0, 8.0),
            );
            let ab = iou(&a, &b);
            let ba = iou(&b, &a);
            assert!(ab == ba, "IoU not symmetric: {} vs {}", ab, ba);
            assert!((0.0..=1.0).contains(&ab), "IoU {} out of range", ab);
            let g = giou(&a, &b);
            assert!(g <= ab + 1e-15, "GIoU {} exceeds IoU {}", g, ab);
            assert!((-1.0..=1.0).contains(&g), "GIoU {} out of range", g);
        }
    }

    #[test]
    fn iou_scale_invariance() {
        let a = bx(1.0, 2.0, 3.0, 5.0);
        let b = bx(2.0, 1.0, 4.0, 4.0);
        let base = iou(&a, &b);
        for k in [2.0, 0.5, 10.0] {
            let sa = bx(a.x1 * k, a.y1 * k, a.x2 * k, a.y2 * k);
            let sb = bx(b.x1 * k, b.y1 * k, b.x2 * k, b.y2 * k);
            let scaled = iou(&sa, &sb);
            assert!(
                (base - scaled).abs() < 1e-12,
                "IoU changed under uniform scale {}: {} vs {}",
                k,
                base,
                scaled
            );
        }
    }

    #[test]
    fn degenerate_boxes_have_zero_iou_even_against_themselves() {
        let d = bx(1.0, 1.0, 1.0, 3.0);
        assert!(iou(&d, &d) == 0.0, "degenerate self IoU must be 0");
        assert!(iou(&d, &bx(0.0, 0.0, 4.0, 4.0)) == 0.0);
        let d2 = bx(2.0, 2.0, 2.0, 2.0);
        assert!(giou(&d, &d2) == 0.0, "GIoU of two degenerate boxes must be 0");
    }

    #[test]
    fn pairwise_matches_hand_matrix() {
        let s = BoxSet::new(
            16.0,
            16.0,
            vec![
                bx(0.0, 0.0, 2.0, 2.0),
                bx(1.0, 1.0, 3.0, 3.0),
                bx(10.0, 10.0, 11.0, 11.0),
            ],
        );
        let m = pairwise_iou(&s);
        let t = 1.0 / 7.0;
        let want = [1.0, t, 0.0, t, 1.0, 0.0, 0.0, 0.0, 1.0];
        for (i, (&g, &w)) in m.data().iter().zip(&want).enumerate() {
            assert!((g - w).abs() < 1e-15, "pairwise entry {}: {} != {}", i, g, w);
        }
    }

    #[test]
    fn pairwise_is_symmetric_and_matches_scalar_loop_exactly() {
        let mut rng = Rng::new(31);
        let boxes: Vec<BBox<f64>> = (0..8)
            .map(|_| {
                bx(
                    rng.uniform(0.0, 30.0),
                    rng.uniform(0.0, 30.0),
                    rng.uniform(0.0, 30.0),
                    rng.uniform(0.0, 30.0),
                )
            })
            .collect();
        let s = BoxSet::new(32.0, 32.0, boxes);
        let m = pairwise_iou(&s);
        let n = s.len();
        for i in 0..n {
            assert!(m.at(&[i, i]) == 1.0 || s.boxes[i].is_degenerate());
            for j in 0..n {
                assert!(
                    m.at(&[i, j]) == m.at(&[j, i]),
                    "pairwise entry ({}, {}) not bitwise symmetric",
                    i,
                    j
                );
                assert!(
                    m.at(&[i, j]) == iou(&s.boxes[i], &s.boxes[j]),
                    "pairwise entry ({}, {}) disagrees with scalar iou",
                    i,
                    j
                );
            }
        }
    }

    #[test]
    fn giou_hand_values() {
        let g1 = giou(&bx(0.0, 0.0, 1.0, 1.0), &bx(2.0, 0.0, 3.0, 1.0));
        assert!((g1 - (-1.0 / 3.0)).abs() < 1e-15, "GIoU {} != -1/3", g1);
        let g2 = giou(&bx(0.0, 0.0, 1.0, 1.0), &bx(9.0, 9.0, 10.0, 10.0));
        assert!((g2 - (-0.98)).abs() < 1e-15, "GIoU {} != -0.98", g2);
        let g3 = giou(&bx(0.0, 0.0, 2.0, 2.0), &bx(0.0, 0.0, 2.0, 2.0));
        assert!(g3 == 1.0, "identical boxes GIoU {} != 1", g3);
    }

    #[test]
    fn apply_deltas_identity_and_hand_value() {
        let b = bx(0.0, 0.0, 2.0, 2.0);
        let same = apply_deltas(&b, (0.0, 0.0, 0.0, 0.0), 16.0, 16.0);
        assert!(same == b, "identity deltas must return the identical box, got {:?}", same);
        let moved = apply_deltas(&b, (0.1, 0.0, 0.0, 0.0), 16.0, 16.0);
        let want = (0.2, 0.0, 2.2, 2.0);
        let got = moved.tuple();
        assert!(
            (got.0 - want.0).abs() < 1e-12
                && (got.1 - want.1).abs() < 1e-12
                && (got.2 - want.2).abs() < 1e-12
                && (got.3 - want.3).abs() < 1e-12,
            "decode gave {:?}, want {:?}",
            got,
            want
        );
    }

    #[test]
    fn apply_deltas_clamps_log_terms() {
        // Centered far from the frame edges so only the log clamp acts.
        let b = bx(499.0, 499.0, 501.0, 501.0);
        let grown = apply_deltas(&b, (0.0, 0.0, 100.0, 0.0), 1e6, 1e6);
        let want_w = 2.0 * (4.0f64).exp();
        assert!(
            (grown.width() - want_w).abs() < 1e-9,
            "width {} should be 2*e^4 = {}",
            grown.width(),
            want_w
        );
        assert!(grown.width().is_finite(), "clamp must prevent overflow");
    }

    #[test]
    fn apply_deltas_clamps_to_image() {
        let b = bx(0.0, 0.0, 4.0, 4.0);
        let pushed = apply_deltas(&b, (10.0, 10.0, 0.0, 0.0), 8.0, 8.0);
        assert!(
            pushed.x1 >= 0.0 && pushed.y1 >= 0.0 && pushed.x2 <= 8.0 && pushed.y2 <= 8.0,
            "decoded box {:?} escaped the image",
            pushed.tuple()
        );
    }

    #[test]
    fn encode_decode_roundtrip() {
        let mut rng = Rng::new(41);
        for _ in 0..100 {
            // Far from the frame edges so no coordinate clamp can trigger.
            let x1 = rng.uniform(40.0, 60.0);
            let y1 = rng.uniform(40.0, 60.0);
            let b = bx(x1, y1, x1 + rng.uniform(1.0, 10.0), y1 + rng.uniform(1.0, 10.0));
            let d = (
                rng.uniform(-0.3, 0.3),
                rng.uniform(-0.3, 0.3),
                rng.uniform(-0.5, 0.5),
                rng.uniform(-0.5, 0.5),
            );
            // Frame large enough that no clamping triggers.
            let to = apply_deltas(&b, d, 1e6, 1e6);
            let back = encode_deltas(&b, &to);
            for (got, want) in [back.0, back.1, back.2, back.3].iter().zip([d.0, d.1, d.2, d.3]) {
                assert!(
                    (got - want).abs() < 1e-9,
                    "delta roundtrip {:?} -> {:?}",
                    d,
                    back
                );
            }
        }
    }

    #[test]
    fn csv_roundtrip_with_and_without_classes() {
        let s = BoxSet::new(
            64.0,
            64.0,
            vec![bx(1.0, 2.0, 3.5, 4.25), bx(10.0, 20.0, 30.0, 40.0)],
        );
        let plain = s.to_csv(None);
        let (back, cls) = BoxSet::<f64>::from_csv(&plain, 64.0, 64.0).expect("parse");
        assert!(cls.is_none());
        assert!(back.len() == 2);
        assert!(back.boxes[0] == s.boxes[0] && back.boxes[1] == s.boxes[1]);

        let tagged = s.to_csv(Some(&[0, 3]));
        let (back2, cls2) = BoxSet::<f64>::from_csv(&tagged, 64.0, 64.0).expect("parse");
        assert!(cls2 == Some(vec![0, 3]));
        assert!(back2.boxes[1] == s.boxes[1]);
    }

    #[test]
    fn csv_malformed_inputs_are_parse_errors() {
        let bad_header = "a,b,c,d\n1,2,3,4\n";
        assert!(BoxSet::<f64>::from_csv(bad_header, 8.0, 8.0).is_err());
        let bad_field = "x1,y1,x2,y2\n1,2,three,4\n";
        assert!(BoxSet::<f64>::from_csv(bad_field, 8.0, 8.0).is_err());
        let bad_arity = "x1,y1,x2,y2\n1,2,3\n";
        assert!(BoxSet::<f64>::from_csv(bad_arity, 8.0, 8.0).is_err());
        let bad_class = "x1,y1,x2,y2,class_id\n1,2,3,4,-1\n";
        assert!(BoxSet::<f64>::from_csv(bad_class, 8.0, 8.0).is_err());
        assert!(BoxSet::<f64>::from_csv("", 8.0, 8.0).is_err(), "empty input needs a header");
    }

    #[test]
    fn boxset_construction_clamps_into_frame() {
        let s = BoxSet::new(4.0, 4.0, vec![bx(-2.0, -2.0, 10.0, 3.0)]);
        assert!(
            s.boxes[0] == bx(0.0, 0.0, 4.0, 3.0),
            "expected clamped box, got {:?}",
            s.boxes[0].tuple()
        );
    }
}
