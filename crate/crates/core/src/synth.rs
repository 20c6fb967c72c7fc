//! Deterministic synthetic detection scenes.
//!
//! A scene is a crowd of axis-aligned rectangles on a blank image plus the
//! feature grid a backbone would have produced for it: each object stamps a
//! separable triangular bump carrying a per-object channel signature onto a
//! low-amplitude noise floor. Everything derives from one SplitMix64 stream
//! seeded by the spec, with all geometric sampling in integers, so scenes
//! are identical bit-for-bit across platforms.
//!
//! Also home to the evaluation side: single-threshold average precision
//! with greedy highest-IoU matching, the standard detection convention
//! (deliberately different from the Hungarian matcher used by the loss).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, BoxSet};
use crate::matcher::Targets;
use crate::rng::Rng;
use crate::roi_align::FeatureMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standard deviation of the additive feature noise.
pub const NOISE_SIGMA: f64 = 0.05;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    /// Image size in pixels.
    pub image_w: usize,
    pub image_h: usize,
    /// Inclusive object-count range.
    pub min_objects: usize,
    pub max_objects: usize,
    /// Probability in `[0, 1]` that an object after the first is planted
    /// next to an earlier one instead of uniformly; higher values crowd the
    /// scene.
    pub overlap_bias: f64,
    /// Inclusive side-length range in pixels.
    pub min_size: usize,
    pub max_size: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            image_w: 64,
            image_h: 64,
            min_objects: 2,
            max_objects: 5,
            overlap_bias: 0.3,
            min_size: 12,
            max_size: 28,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_size < 2 {
            return Err(Error::Scene(format!(
                "min_size {} would allow areas below 4 square pixels",
                self.min_size
            )));
        }
        if self.min_size > self.max_size {
            return Err(Error::Scene(format!(
                "size range [{}, {}] is empty",
                self.min_size, self.max_size
            )));
        }
        if self.max_size > self.image_w.min(self.image_h) {
            return Err(Error::Scene(format!(
                "max_size {} exceeds the {}x{} image",
                self.max_size, self.image_w, self.image_h
            )));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Scene(format!(
                "object count range [{}, {}] is empty",
                self.min_objects, self.max_objects
            )));
        }
        if !self.overlap_bias.is_finite() || !(0.0..=1.0).contains(&self.overlap_bias) {
            return Err(Error::Scene(format!(
                "overlap_bias {} is outside [0, 1]",
                self.overlap_bias
            )));
        }
        Ok(())
    }
}

/// One generated task: ground-truth targets and the feature grid the
/// detector consumes.
#[derive(Debug, Clone)]
pub struct Scene<S: Scalar> {
    pub targets: Targets<S>,
    pub feature_map: FeatureMap<S>,
}

fn grid_extent(image: usize, stride: f64, what: &str) -> Result<usize> {
    if !(stride.is_finite() && stride >= 1.0 && stride.fract() == 0.0) {
        return Err(Error::Scene(format!(
            "stride {} must be a positive integer",
            stride
        )));
    }
    let s = stride as usize;
    if image == 0 || image % s != 0 {
        return Err(Error::Scene(format!(
            "image {} {} is not a positive multiple of stride {}",
            what, image, s
        )));
    }
    Ok(image / s)
}

/// Samples a scene and renders its features; `d` is the feature channel
/// count and `stride` the image-to-grid ratio (an integer number of
/// pixels). All draws come from one stream seeded by `spec.seed`: object
/// count, then per object size / placement, then the noise floor, then the
/// channel signatures in target order.
pub fn generate_scene<S: Scalar>(spec: &SceneSpec, d: usize, stride: f64) -> Result<Scene<S>> {
    spec.validate()?;
    grid_extent(spec.image_w, stride, "width")?;
    grid_extent(spec.image_h, stride, "height")?;
    let mut rng = Rng::new(spec.seed);
    let n = rng.int_in(spec.min_objects as u64, spec.max_objects as u64) as usize;

    // Integer top-left + size tuples; kept integral so placement never
    // depends on float rounding.
    let mut rects: Vec<(i64, i64, i64, i64)> = Vec::with_capacity(n);
    for i in 0..n {
        let w = rng.int_in(spec.min_size as u64, spec.max_size as u64) as i64;
        let h = rng.int_in(spec.min_size as u64, spec.max_size as u64) as i64;
        let max_x = spec.image_w as i64 - w;
        let max_y = spec.image_h as i64 - h;
        let (x, y) = if i > 0 && rng.next_f64() < spec.overlap_bias {
            // Crowding: jitter around a random earlier object's corner by at
            // most half the new object's extent per axis.
            let (ax, ay, _, _) = rects[rng.below(i as u64) as usize];
            let jx = rng.int_in(0, w as u64) as i64 - w / 2;
            let jy = rng.int_in(0, h as u64) as i64 - h / 2;
            ((ax + jx).clamp(0, max_x), (ay + jy).clamp(0, max_y))
        } else {
            (
                rng.int_in(0, max_x as u64) as i64,
                rng.int_in(0, max_y as u64) as i64,
            )
        };
        rects.push((x, y, w, h));
    }

    let boxes: Vec<BBox<S>> = rects
        .iter()
        .map(|&(x, y, w, h)| {
            BBox::new(
                S::from_f(x as f64),
                S::from_f(y as f64),
                S::from_f((x + w) as f64),
                S::from_f((y + h) as f64),
            )
        })
        .collect();
    let classes = vec![0usize; n];
    let targets = Targets::new(
        BoxSet::new(S::from_f(spec.image_w as f64), S::from_f(spec.image_h as f64), boxes),
        classes,
    );
    let feature_map = render_features(&targets, d, stride, &mut rng)?;
    Ok(Scene {
        targets,
        feature_map,
    })
}

/// Renders the feature grid for a target set. A noise floor of deviation
/// [`NOISE_SIGMA`] covers the grid; each object then adds two kinds of
/// response. The first half of the channels is shared by all objects and
/// carries geometry directly: even channels get a separable triangular
/// bump peaking at the box center, odd channels a soft occupancy map that
/// is 1 deep inside the box, crosses 0.5 at its edges, and fades to 0 over
/// half a stride outside. The remaining channels carry a per-object
/// signature (magnitude uniform in `[0.5, 1.5)`, then a sign bit, per
/// channel) scaled by the triangular bump, which tells instances apart.
/// Draw order: the whole noise grid channel-major, then signatures in
/// target order.
pub fn render_features<S: Scalar>(
    targets: &Targets<S>,
    d: usize,
    stride: f64,
    rng: &mut Rng,
) -> Result<FeatureMap<S>> {
    assert!(d >= 4, "render_features: need at least 4 channels, got {}", d);
    let image_w = targets.boxes.image_w.to_f();
    let image_h = targets.boxes.image_h.to_f();
    let gw = grid_extent(image_w as usize, stride, "width")?;
    let gh = grid_extent(image_h as usize, stride, "height")?;
    let plane = gh * gw;
    let half = d / 2;

    let mut data = vec![0.0f64; d * plane];
    for v in data.iter_mut() {
        *v = rng.gauss() * NOISE_SIGMA;
    }
    for b in &targets.boxes.boxes {
        let sig: Vec<f64> = (half..d)
            .map(|_| {
                let mag = rng.uniform(0.5, 1.5);
                if rng.next_u64() & 1 == 1 {
                    -mag
                } else {
                    mag
                }
            })
            .collect();
        let (cx, cy, w, h) = b.to_center_size();
        let (cx, cy) = (cx.to_f(), cy.to_f());
        let (hw, hh) = (w.to_f() * 0.5, h.to_f() * 0.5);
        for gy in 0..gh {
            let py = (gy as f64 + 0.5) * stride;
            let ty = 1.0 - (py - cy).abs() / hh;
            let oy = ((hh - (py - cy).abs()) / stride + 0.5).clamp(0.0, 1.0);
            if ty <= 0.0 && oy <= 0.0 {
                continue;
            }
            for gx in 0..gw {
                let px = (gx as f64 + 0.5) * stride;
                let tx = 1.0 - (px - cx).abs() / hw;
                let ox = ((hw - (px - cx).abs()) / stride + 0.5).clamp(0.0, 1.0);
                let tri = if tx > 0.0 && ty > 0.0 { tx * ty } else { 0.0 };
                let occ = ox * oy;
                if tri <= 0.0 && occ <= 0.0 {
                    continue;
                }
                let at = gy * gw + gx;
                for c in 0..half {
                    data[c * plane + at] += if c % 2 == 0 { tri } else { occ };
                }
                if tri > 0.0 {
                    for (k, s) in sig.iter().enumerate() {
                        data[(half + k) * plane + at] += s * tri;
                    }
                }
            }
        }
    }
    let data: Vec<S> = data.into_iter().map(S::from_f).collect();
    Ok(FeatureMap::new(Tensor::constant(&[d, gh, gw], data), stride))
}

/// Feature-map file layout: `channels, height, width` as `u64`, then the
/// stride as `f64`, then the values channel-major, everything little-endian.
pub fn write_feature_map<S: Scalar>(path: &Path, fm: &FeatureMap<S>) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + fm.data.numel() * 8);
    for v in [fm.channels() as u64, fm.height() as u64, fm.width() as u64] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&fm.stride.to_le_bytes());
    for v in fm.data.data() {
        buf.extend_from_slice(&v.to_f().to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_feature_map<S: Scalar>(path: &Path) -> Result<FeatureMap<S>> {
    let raw = fs::read(path)?;
    let fail = |msg: &str| Error::Parse(format!("{}: {}", path.display(), msg));
    if raw.len() < 32 {
        return Err(fail("shorter than the 32-byte header"));
    }
    let word = |i: usize| u64::from_le_bytes(raw[8 * i..8 * i + 8].try_into().unwrap());
    let (c, h, w) = (word(0) as usize, word(1) as usize, word(2) as usize);
    let stride = f64::from_le_bytes(raw[24..32].try_into().unwrap());
    if c == 0 || h == 0 || w == 0 {
        return Err(fail("zero extent in the header"));
    }
    if !(stride.is_finite() && stride > 0.0) {
        return Err(fail("stride is not a positive finite number"));
    }
    let expect = 32 + c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| fail("header extents overflow"))?;
    if raw.len() != expect {
        return Err(fail("payload length does not match the header extents"));
    }
    let data: Vec<S> = raw[32..]
        .chunks_exact(8)
        .map(|b| S::from_f(f64::from_le_bytes(b.try_into().unwrap())))
        .collect();
    Ok(FeatureMap::new(Tensor::constant(&[c, h, w], data), stride))
}

impl<S: Scalar> Scene<S> {
    /// Writes `targets.csv` and `features.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("targets.csv"),
            self.targets.boxes.to_csv(Some(&self.targets.classes)),
        )?;
        write_feature_map(&dir.join("features.bin"), &self.feature_map)
    }

    /// Reads a directory written by [`Scene::save`]; image extents come
    /// from the feature grid times its stride.
    pub fn load(dir: &Path) -> Result<Scene<S>> {
        let feature_map = read_feature_map(&dir.join("features.bin"))?;
        let iw = S::from_f(feature_map.width() as f64 * feature_map.stride);
        let ih = S::from_f(feature_map.height() as f64 * feature_map.stride);
        let text = fs::read_to_string(dir.join("targets.csv"))?;
        let (boxes, classes) = BoxSet::from_csv(&text, iw, ih)?;
        let classes = classes
            .ok_or_else(|| Error::Parse("targets.csv lacks the class_id column".into()))?;
        Ok(Scene {
            targets: Targets::new(boxes, classes),
            feature_map,
        })
    }
}

/// Scored predictions for one scene, parallel lists.
#[derive(Debug, Clone)]
pub struct Detections<S: Scalar> {
    pub boxes: BoxSet<S>,
    pub scores: Vec<f64>,
}

impl<S: Scalar> Detections<S> {
    pub fn new(boxes: BoxSet<S>, scores: Vec<f64>) -> Self {
        assert!(
            boxes.len() == scores.len(),
            "{} boxes with {} scores",
            boxes.len(),
            scores.len()
        );
        Detections { boxes, scores }
    }
}

/// Single-threshold average precision over a set of scenes.
///
/// Predictions pool across scenes and sort by descending score (ties break
/// by scene order, then box coordinates, so any reordering of a scene's
/// prediction list leaves the result unchanged). Each prediction greedily
/// claims the unmatched target of its own scene with the highest IoU, a hit
/// requiring IoU at or above `iou_threshold`; the all-point interpolated
/// area under the resulting precision-recall curve is returned.
///
/// A scene set without a single target has no recall axis and errors.
pub fn evaluate_ap<S: Scalar>(
    scenes: &[(Detections<S>, Targets<S>)],
    iou_threshold: f64,
) -> Result<f64> {
    assert!(
        iou_threshold.is_finite() && iou_threshold > 0.0 && iou_threshold <= 1.0,
        "iou_threshold {} outside (0, 1]",
        iou_threshold
    );
    let total_targets: usize = scenes.iter().map(|(_, t)| t.boxes.len()).sum();
    if total_targets == 0 {
        return Err(Error::Input(
            "average precision is undefined over zero targets".into(),
        ));
    }
    struct Flat {
        score: f64,
        scene: usize,
        key: (f64, f64, f64, f64),
        idx: usize,
    }
    let mut preds: Vec<Flat> = Vec::new();
    for (si, (dets, _)) in scenes.iter().enumerate() {
        for (i, b) in dets.boxes.boxes.iter().enumerate() {
            let score = dets.scores[i];
            if !score.is_finite() {
                return Err(Error::Input(format!(
                    "prediction {} in scene {} has score {}",
                    i, si, score
                )));
            }
            let t = b.tuple();
            preds.push(Flat {
                score,
                scene: si,
                key: (t.0.to_f(), t.1.to_f(), t.2.to_f(), t.3.to_f()),
                idx: i,
            });
        }
    }
    preds.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.scene.cmp(&b.scene))
            .then(a.key.partial_cmp(&b.key).unwrap())
            .then(a.idx.cmp(&b.idx))
    });

    let mut claimed: Vec<Vec<bool>> = scenes.iter().map(|(_, t)| vec![false; t.boxes.len()]).collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    // (recall, precision) after each prediction in rank order.
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(preds.len());
    for p in &preds {
        let (dets, targets) = &scenes[p.scene];
        let pb = &dets.boxes.boxes[p.idx];
        let mut best: Option<(f64, usize)> = None;
        for (j, tb) in targets.boxes.boxes.iter().enumerate() {
            if claimed[p.scene][j] {
                continue;
            }
            let v = iou(pb, tb).to_f();
            if best.map_or(true, |(bv, _)| v > bv) {
                best = Some((v, j));
            }
        }
        match best {
            Some((v, j)) if v >= iou_threshold => {
                claimed[p.scene][j] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
        points.push((
            tp as f64 / total_targets as f64,
            tp as f64 / (tp + fp) as f64,
        ));
    }

    let mut ap = 0.0;
    let mut pmax = 0.0f64;
    for i in (0..points.len()).rev() {
        let (r, p) = points[i];
        let r_prev = if i == 0 { 0.0 } else { points[i - 1].0 };
        pmax = pmax.max(p);
        ap += (r - r_prev) * pmax;
    }
    Ok(ap)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            ..SceneSpec::default()
        }
    }

    fn tuples(t: &Targets<f64>) -> Vec<(f64, f64, f64, f64)> {
        t.boxes.boxes.iter().map(|b| b.tuple()).collect()
    }

    #[test]
    fn same_spec_gives_identical_scene() {
        let s = spec(9);
        let a: Scene<f64> = generate_scene(&s, 8, 8.0).unwrap();
        let b: Scene<f64> = generate_scene(&s, 8, 8.0).unwrap();
        assert_eq!(tuples(&a.targets), tuples(&b.targets));
        assert_eq!(a.targets.classes, b.targets.classes);
        assert_eq!(a.feature_map.data.data(), b.feature_map.data.data());
    }

    #[test]
    fn object_count_range_is_exact() {
        for seed in 0..20 {
            let mut s = spec(seed);
            s.min_objects = 3;
            s.max_objects = 3;
            let sc: Scene<f64> = generate_scene(&s, 8, 8.0).unwrap();
            assert_eq!(sc.targets.boxes.len(), 3);
            for b in &sc.targets.boxes.boxes {
                assert!(b.area() >= 4.0);
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 64.0 && b.y2 <= 64.0);
            }
        }
    }

    #[test]
    fn overlap_bias_raises_mean_pairwise_iou() {
        let mean_iou = |bias: f64| {
            let mut acc = 0.0;
            let mut pairs = 0usize;
            for seed in 0..100 {
                let mut s = spec(seed);
                s.min_objects = 3;
                s.max_objects = 5;
                s.overlap_bias = bias;
                let sc: Scene<f64> = generate_scene(&s, 8, 8.0).unwrap();
                let bs = &sc.targets.boxes.boxes;
                for i in 0..bs.len() {
                    for j in 0..i {
                        acc += iou(&bs[i], &bs[j]);
                        pairs += 1;
                    }
                }
            }
            acc / pairs as f64
        };
        let lo = mean_iou(0.0);
        let hi = mean_iou(0.9);
        assert!(
            hi > lo,
            "crowded scenes should overlap more: bias 0.9 gave {}, bias 0.0 gave {}",
            hi,
            lo
        );
    }

    #[test]
    fn empty_scene_is_pure_noise_at_the_stated_sigma() {
        let mut s = spec(4);
        s.min_objects = 0;
        s.max_objects = 0;
        let sc: Scene<f64> = generate_scene(&s, 8, 4.0).unwrap();
        let data = sc.feature_map.data.data();
        let var = data.iter().map(|v| v * v).sum::<f64>() / data.len() as f64;
        let sigma = var.sqrt();
        assert!(
            (sigma - NOISE_SIGMA).abs() <= 0.2 * NOISE_SIGMA,
            "empirical sigma {}",
            sigma
        );
    }

    #[test]
    fn bump_mass_concentrates_inside_boxes() {
        let mut s = spec(12);
        s.min_objects = 3;
        s.max_objects = 3;
        s.min_size = 12;
        s.max_size = 20;
        s.overlap_bias = 0.0;
        let sc: Scene<f64> = generate_scene(&s, 8, 8.0).unwrap();
        let fm = &sc.feature_map;
        let (d, gh, gw) = (fm.channels(), fm.height(), fm.width());
        let data = fm.data.data();
        let stride = fm.stride;

        // Grid cells whose centers fall inside a box.
        let cells_of = |b: &BBox<f64>| {
            let mut cells = Vec::new();
            for gy in 0..gh {
                for gx in 0..gw {
                    let px = (gx as f64 + 0.5) * stride;
                    let py = (gy as f64 + 0.5) * stride;
                    if px > b.x1 && px < b.x2 && py > b.y1 && py < b.y2 {
                        cells.push((gy, gx));
                    }
                }
            }
            cells
        };
        let mass = |cells: &[(usize, usize)]| {
            let mut acc = 0.0;
            for &(gy, gx) in cells {
                for c in 0..d {
                    acc += data[c * gh * gw + gy * gw + gx].abs();
                }
            }
            acc
        };
        let all_occupied: Vec<(usize, usize)> = sc
            .targets
            .boxes
            .boxes
            .iter()
            .flat_map(|b| cells_of(b))
            .collect();

        for b in &sc.targets.boxes.boxes {
            let cells = cells_of(b);
            assert!(!cells.is_empty());
            let (min_y, max_y) = (
                cells.iter().map(|c| c.0).min().unwrap(),
                cells.iter().map(|c| c.0).max().unwrap(),
            );
            let (min_x, max_x) = (
                cells.iter().map(|c| c.1).min().unwrap(),
                cells.iter().map(|c| c.1).max().unwrap(),
            );
            let (wh, ww) = (max_y - min_y + 1, max_x - min_x + 1);
            // An equal-size window touching no object at all.
            let mut empty: Option<Vec<(usize, usize)>> = None;
            'scan: for oy in 0..=(gh - wh) {
                for ox in 0..=(gw - ww) {
                    let window: Vec<(usize, usize)> = (0..wh)
                        .flat_map(|dy| (0..ww).map(move |dx| (oy + dy, ox + dx)))
                        .collect();
                    if window.iter().all(|c| !all_occupied.contains(c)) {
                        empty = Some(window);
                        break 'scan;
                    }
                }
            }
            let empty = empty.expect("no object-free window of matching size");
            let inside = mass(&cells);
            let outside = mass(&empty);
            assert!(
                inside > outside,
                "mass inside {} should beat an empty window's {}",
                inside,
                outside
            );
        }
    }

    #[test]
    fn render_is_deterministic_for_fixed_targets() {
        let targets = Targets::new(
            BoxSet::new(32.0, 32.0, vec![BBox::new(4.0, 6.0, 20.0, 22.0)]),
            vec![0],
        );
        let a: FeatureMap<f64> = render_features(&targets, 8, 8.0, &mut Rng::new(5)).unwrap();
        let b: FeatureMap<f64> = render_features(&targets, 8, 8.0, &mut Rng::new(5)).unwrap();
        assert_eq!(a.data.data(), b.data.data());
    }

    #[test]
    fn impossible_specs_error() {
        let mut s = spec(0);
        s.min_size = 80;
        s.max_size = 90;
        assert!(matches!(
            generate_scene::<f64>(&s, 8, 8.0),
            Err(Error::Scene(_))
        ));
        let mut s = spec(0);
        s.min_objects = 5;
        s.max_objects = 2;
        assert!(matches!(
            generate_scene::<f64>(&s, 8, 8.0),
            Err(Error::Scene(_))
        ));
        // 64 is not a multiple of 7.
        assert!(matches!(
            generate_scene::<f64>(&spec(0), 8, 7.0),
            Err(Error::Scene(_))
        ));
    }

    fn one_scene(
        preds: Vec<(BBox<f64>, f64)>,
        targets: Vec<BBox<f64>>,
    ) -> (Detections<f64>, Targets<f64>) {
        let n = targets.len();
        let (boxes, scores): (Vec<_>, Vec<_>) = preds.into_iter().unzip();
        (
            Detections::new(BoxSet::new(64.0, 64.0, boxes), scores),
            Targets::new(BoxSet::new(64.0, 64.0, targets), vec![0; n]),
        )
    }

    #[test]
    fn perfect_predictions_score_full_ap() {
        let t1 = vec![BBox::new(2.0, 3.0, 20.0, 21.0), BBox::new(30.0, 8.0, 50.0, 28.0)];
        let t2 = vec![BBox::new(10.0, 32.0, 34.0, 52.0)];
        let scenes = vec![
            one_scene(t1.iter().map(|b| (*b, 1.0)).collect(), t1.clone()),
            one_scene(t2.iter().map(|b| (*b, 1.0)).collect(), t2.clone()),
        ];
        assert_eq!(evaluate_ap(&scenes, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn no_predictions_and_no_targets_behave_as_specified() {
        let t = vec![BBox::new(2.0, 3.0, 20.0, 21.0)];
        let scenes = vec![one_scene(vec![], t)];
        assert_eq!(evaluate_ap(&scenes, 0.5).unwrap(), 0.0);

        let none = vec![one_scene(
            vec![(BBox::new(1.0, 1.0, 5.0, 5.0), 0.9)],
            vec![],
        )];
        assert!(matches!(evaluate_ap(&none, 0.5), Err(Error::Input(_))));
    }

    #[test]
    fn wrong_then_right_prediction_halves_ap() {
        let target = BBox::new(10.0, 10.0, 30.0, 30.0);
        // Rank 1 misses everything, rank 2 is exact:
        // after rank 1: precision 0, recall 0
        // after rank 2: precision 1/2, recall 1
        // interpolated area = 1.0 * 0.5
        let scenes = vec![one_scene(
            vec![
                (BBox::new(40.0, 40.0, 50.0, 50.0), 0.9),
                (target, 0.6),
            ],
            vec![target],
        )];
        assert_eq!(evaluate_ap(&scenes, 0.5).unwrap(), 0.5);

        // The same pair with the correct one ranked first scores full AP;
        // demoting a correct prediction below a wrong one never helps.
        let scenes = vec![one_scene(
            vec![
                (BBox::new(40.0, 40.0, 50.0, 50.0), 0.6),
                (target, 0.9),
            ],
            vec![target],
        )];
        assert_eq!(evaluate_ap(&scenes, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn ap_ignores_prediction_list_order() {
        let targets = vec![
            BBox::new(4.0, 4.0, 20.0, 20.0),
            BBox::new(30.0, 30.0, 50.0, 50.0),
        ];
        let preds = vec![
            (BBox::new(5.0, 4.0, 21.0, 20.0), 0.8),
            (BBox::new(30.0, 31.0, 50.0, 51.0), 0.8),
            (BBox::new(1.0, 40.0, 9.0, 48.0), 0.8),
            (BBox::new(31.0, 30.0, 51.0, 50.0), 0.4),
        ];
        let base = evaluate_ap(&[one_scene(preds.clone(), targets.clone())], 0.5).unwrap();
        let mut rev = preds.clone();
        rev.reverse();
        let mut rot = preds.clone();
        rot.rotate_left(2);
        for variant in [rev, rot] {
            let ap = evaluate_ap(&[one_scene(variant, targets.clone())], 0.5).unwrap();
            assert_eq!(ap, base);
        }
    }

    #[test]
    fn scene_roundtrips_through_files() {
        let s = spec(21);
        let scene: Scene<f64> = generate_scene(&s, 8, 8.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        scene.save(dir.path()).unwrap();
        let back: Scene<f64> = Scene::load(dir.path()).unwrap();
        assert_eq!(tuples(&scene.targets), tuples(&back.targets));
        assert_eq!(scene.targets.classes, back.targets.classes);
        assert_eq!(
            scene.feature_map.data.data(),
            back.feature_map.data.data()
        );
        assert_eq!(scene.feature_map.stride, back.feature_map.stride);
    }
}
