//! Named invariant checks behind the `selftest` subcommand.
//!
//! Every module contributes a handful of fast assertions: hand-computed
//! values, oracle comparisons, reductions, and one deliberately broken
//! variant that the oracle table must catch. Each check names the property
//! it guards so a failure points straight at the regression.

use std::env;
use std::fs;
use std::path::PathBuf;
use std::result::Result as StdResult;

use crate::attention::{esa_weights, iou_esa, standard_msa, AttnConfig, MhsaParams};
use crate::dynamic_head::BottleneckMask;
use crate::error::Error;
use crate::geometry::{giou, iou, BBox, BoxSet};
use crate::matcher::{hungarian, Targets};
use crate::oracles::{brute_force_assignment, dense_roi_pool, raster_iou};
use crate::pipeline::{
    forward, train_step, DetectorConfig, DisentangleMode, ModelState, Optimizer,
};
use crate::rng::Rng;
use crate::roi_align::{roi_align, FeatureMap};
use crate::synth::{evaluate_ap, generate_scene, Detections, Scene, SceneSpec};
use crate::tensor::{grad_check_default, load_named, save_named, Tensor};

type T = Tensor<f64>;
type CheckResult = StdResult<(), String>;

pub struct Check {
    pub module: &'static str,
    pub name: &'static str,
    pub run: fn() -> CheckResult,
}

pub struct Outcome {
    pub module: &'static str,
    pub name: &'static str,
    pub failure: Option<String>,
}

fn ensure(cond: bool, msg: String) -> CheckResult {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

fn close(a: f64, b: f64, tol: f64, what: &str) -> CheckResult {
    ensure(
        (a - b).abs() <= tol,
        format!("{}: {} vs {} (tol {})", what, a, b, tol),
    )
}

/// Scratch directory for roundtrip checks; caller removes it.
fn scratch_dir(tag: &str) -> StdResult<PathBuf, String> {
    let dir = env::temp_dir().join(format!("selfcheck-{}-{}", tag, std::process::id()));
    fs::create_dir_all(&dir).map_err(|e| format!("cannot create {}: {}", dir.display(), e))?;
    Ok(dir)
}

fn rand_t(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> T {
    let n: usize = shape.iter().product();
    T::constant(shape, (0..n).map(|_| rng.uniform(lo, hi)).collect())
}

fn c_rng_reference() -> CheckResult {
    let mut r = Rng::new(1234567);
    let got = [r.next_u64(), r.next_u64(), r.next_u64()];
    let want = [
        6457827717110365317u64,
        3203168211198807973u64,
        9817491932198370423u64,
    ];
    ensure(
        got == want,
        format!("splitmix64 outputs {:?} differ from reference {:?}", got, want),
    )
}

fn c_rng_unit_interval() -> CheckResult {
    let mut r = Rng::new(7);
    for _ in 0..1000 {
        let x = r.next_f64();
        if !(0.0..1.0).contains(&x) {
            return Err(format!("unit draw {} outside [0,1)", x));
        }
    }
    Ok(())
}

fn c_tensor_arithmetic_grads() -> CheckResult {
    let mut rng = Rng::new(3);
    let a = rand_t(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rand_t(&mut rng, &[3, 4], 0.5, 1.5);
    let wt = rand_t(&mut rng, &[3, 4], -1.0, 1.0);
    for (name, worst) in [
        (
            "add",
            grad_check_default(|x: &T| x.add(&b).mul(&wt).sum(), &a),
        ),
        ("mul", grad_check_default(|x: &T| x.mul(&b).mul(&wt).sum(), &a)),
        ("div", grad_check_default(|x: &T| x.div(&b).mul(&wt).sum(), &a)),
        (
            "matmul",
            grad_check_default(|x: &T| x.matmul(&b.transpose_last2()).sum(), &a),
        ),
    ] {
        let w = worst.map_err(|e| format!("{}: {}", name, e))?;
        ensure(w < 1e-5, format!("{} gradient off by {:e}", name, w))?;
    }
    Ok(())
}

fn c_tensor_softmax_rows() -> CheckResult {
    let mut rng = Rng::new(5);
    let x = rand_t(&mut rng, &[4, 6], -3.0, 3.0);
    let s = x.softmax_rows();
    for row in 0..4 {
        let sum: f64 = (0..6).map(|j| s.at(&[row, j])).sum();
        close(sum, 1.0, 1e-12, &format!("softmax row {}", row))?;
    }
    Ok(())
}

fn c_tensor_layer_norm_shift() -> CheckResult {
    let mut rng = Rng::new(6);
    let x = rand_t(&mut rng, &[3, 8], -1.0, 1.0);
    let shifted = x.add_scalar(3.7);
    let gamma = rand_t(&mut rng, &[8], 0.5, 1.5);
    let beta = rand_t(&mut rng, &[8], -0.5, 0.5);
    let a = x.layer_norm(&gamma, &beta, 1e-6);
    let b = shifted.layer_norm(&gamma, &beta, 1e-6);
    for i in 0..a.numel() {
        close(
            a.data()[i],
            b.data()[i],
            1e-9,
            &format!("normalized entry {} under a constant shift", i),
        )?;
    }
    Ok(())
}

fn c_tensor_checkpoint_roundtrip() -> CheckResult {
    let dir = scratch_dir("ckpt")?;
    let path = dir.join("weights.bin");
    let mut rng = Rng::new(8);
    let entries = vec![
        ("alpha".to_string(), rand_t(&mut rng, &[3, 4], -2.0, 2.0)),
        ("beta".to_string(), rand_t(&mut rng, &[7], -2.0, 2.0)),
    ];
    let res = (|| -> CheckResult {
        save_named(&path, &entries).map_err(|e| format!("save: {}", e))?;
        let back = load_named(&path).map_err(|e| format!("load: {}", e))?;
        ensure(back.len() == 2, format!("{} entries after roundtrip", back.len()))?;
        for ((name, t), (rname, rshape, rdata)) in entries.iter().zip(&back) {
            ensure(name == rname, format!("name {} became {}", name, rname))?;
            ensure(
                t.shape() == &rshape[..],
                format!("shape {:?} became {:?}", t.shape(), rshape),
            )?;
            ensure(
                t.data() == &rdata[..],
                format!("values for {} changed in the file roundtrip", name),
            )?;
        }
        Ok(())
    })();
    let _ = fs::remove_dir_all(&dir);
    res
}

fn c_geometry_hand_values() -> CheckResult {
    let a = BBox::new(0.0, 0.0, 2.0, 2.0);
    let b = BBox::new(1.0, 1.0, 3.0, 3.0);
    close(iou(&a, &b), 1.0 / 7.0, 1e-15, "unit-overlap iou")?;
    close(
        iou(&a, &b),
        raster_iou(a.tuple(), b.tuple(), 32),
        1e-12,
        "iou against the rasterization oracle",
    )?;
    close(
        giou(&BBox::new(0.0, 0.0, 1.0, 1.0), &BBox::new(2.0, 0.0, 3.0, 1.0)),
        -1.0 / 3.0,
        1e-15,
        "adjacent-gap giou",
    )?;
    close(
        giou(&BBox::new(0.0, 0.0, 1.0, 1.0), &BBox::new(9.0, 9.0, 10.0, 10.0)),
        -0.98,
        1e-15,
        "far-corner giou",
    )?;
    close(
        giou(&BBox::new(0.0, 0.0, 2.0, 2.0), &BBox::new(0.0, 0.0, 2.0, 2.0)),
        1.0,
        0.0,
        "identical-box giou",
    )
}

fn c_geometry_giou_range() -> CheckResult {
    let mut rng = Rng::new(12);
    for _ in 0..10_000 {
        let mut bx = || {
            let x1 = rng.uniform(0.0, 50.0);
            let y1 = rng.uniform(0.0, 50.0);
            BBox::new(x1, y1, x1 + rng.uniform(0.5, 30.0), y1 + rng.uniform(0.5, 30.0))
        };
        let a = bx();
        let b = bx();
        let g = giou(&a, &b);
        let i = iou(&a, &b);
        ensure(
            (-1.0..=1.0).contains(&g),
            format!("giou {} outside [-1, 1]", g),
        )?;
        ensure(g <= i + 1e-15, format!("giou {} exceeds iou {}", g, i))?;
    }
    Ok(())
}

/// Mutation fixture: a giou variant with the enclosing-hull penalty added
/// instead of subtracted must be rejected by the hand-value table. If this
/// check ever fails, the table has lost the power to catch a sign error.
fn c_geometry_sign_flip_caught() -> CheckResult {
    fn giou_hull_sign_flipped(a: &BBox<f64>, b: &BBox<f64>) -> f64 {
        let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
        let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
        let inter = ix * iy;
        let union = a.area() + b.area() - inter;
        let hull = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
        inter / union + (hull - union) / hull
    }
    let a = BBox::new(0.0, 0.0, 1.0, 1.0);
    let b = BBox::new(2.0, 0.0, 3.0, 1.0);
    let broken = giou_hull_sign_flipped(&a, &b);
    let want = -1.0 / 3.0;
    ensure(
        (broken - want).abs() > 1e-3,
        format!(
            "sign-flipped variant produced {} within tolerance of {}; the table no longer catches the mutation",
            broken, want
        ),
    )
}

fn c_attention_reduction() -> CheckResult {
    for (seed, n, d, h) in [(21u64, 5usize, 8usize, 2usize), (22, 3, 12, 4)] {
        let mut rng = Rng::new(seed);
        let cfg = AttnConfig::new(d, h);
        let params: MhsaParams<f64> = MhsaParams::init(AttnConfig::new(d, h), &mut rng, "a");
        let q = rand_t(&mut rng, &[n, d], -1.0, 1.0);
        let ones = T::filled(&[n, n], 1.0);
        let esa = iou_esa(&q, &ones, &params, cfg);
        let msa = standard_msa(&q, &params, AttnConfig::new(d, h));
        ensure(
            esa.data() == msa.data(),
            format!("all-ones weighting diverged from plain attention at n={} d={} h={}", n, d, h),
        )?;
    }
    Ok(())
}

fn c_attention_rows_and_shift() -> CheckResult {
    let mut rng = Rng::new(23);
    for _ in 0..20 {
        let n = 4;
        let logits = rand_t(&mut rng, &[n, n], -2.0, 2.0);
        let mut iou_m = rand_t(&mut rng, &[n, n], 0.05, 1.0);
        let d = iou_m.data().to_vec();
        iou_m = T::constant(&[n, n], d);
        let w = esa_weights(&logits, &iou_m);
        for row in 0..n {
            let s: f64 = (0..n).map(|j| w.at(&[row, j])).sum();
            close(s, 1.0, 1e-9, &format!("enhanced row {}", row))?;
        }
        let shifted = esa_weights(&logits.add_scalar(5.3), &iou_m);
        for i in 0..w.numel() {
            ensure(
                (w.data()[i] - shifted.data()[i]).abs() < 1e-12,
                format!("row-constant shift moved weight {} by more than 1e-12", i),
            )?;
        }
    }
    Ok(())
}

fn c_attention_hand_value() -> CheckResult {
    let logits = T::zeros(&[2, 2]);
    let iou_m = T::constant(&[2, 2], vec![1.0, 0.5, 0.5, 1.0]);
    let w = esa_weights(&logits, &iou_m);
    let want = [2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0];
    for (i, (&g, &want)) in w.data().iter().zip(&want).enumerate() {
        close(g, want, 1e-12, &format!("two-query weight {}", i))?;
    }
    Ok(())
}

// Smooth random content; per-cell white noise would make the sub-sampled
// pooler and the dense oracle disagree no matter how many probes run.
fn bumpy_map(rng: &mut Rng, c: usize, h: usize, w: usize) -> FeatureMap<f64> {
    let mut data = vec![0.0; c * h * w];
    for ch in 0..c {
        for _ in 0..3 {
            let cx = rng.uniform(1.0, w as f64 - 1.0);
            let cy = rng.uniform(1.0, h as f64 - 1.0);
            let rx = rng.uniform(1.5, 3.0);
            let ry = rng.uniform(1.5, 3.0);
            let amp = rng.uniform(0.3, 1.0);
            for y in 0..h {
                for x in 0..w {
                    let bx = (1.0 - (x as f64 - cx).abs() / rx).max(0.0);
                    let by = (1.0 - (y as f64 - cy).abs() / ry).max(0.0);
                    data[ch * h * w + y * w + x] += amp * bx * by;
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                data[ch * h * w + y * w + x] += rng.uniform(-0.02, 0.02);
            }
        }
    }
    FeatureMap::new(T::constant(&[c, h, w], data), 8.0)
}

fn c_roi_dense_oracle() -> CheckResult {
    let mut rng = Rng::new(31);
    let (c, h, w) = (2usize, 8usize, 8usize);
    let fm = bumpy_map(&mut rng, c, h, w);
    for _ in 0..3 {
        let x1 = rng.uniform(2.0, 20.0);
        let y1 = rng.uniform(2.0, 20.0);
        let bb = BBox::new(x1, y1, x1 + rng.uniform(16.0, 40.0), y1 + rng.uniform(16.0, 40.0));
        let boxes = BoxSet::new(64.0, 64.0, vec![bb]);
        let pooled = roi_align(&fm, &boxes, 7, 2);
        let b = &boxes.boxes[0];
        let rect = (b.x1 / 8.0 - 0.5, b.y1 / 8.0 - 0.5, b.x2 / 8.0 - 0.5, b.y2 / 8.0 - 0.5);
        for ch in 0..c {
            let plane: Vec<f64> = fm.data.data()[ch * h * w..(ch + 1) * h * w].to_vec();
            let want = dense_roi_pool(&plane, h, w, rect, 7, 16);
            for bin in 0..49 {
                close(
                    pooled.data.at(&[0, bin, ch]),
                    want[bin],
                    1e-2,
                    &format!("pooled bin {} channel {}", bin, ch),
                )?;
            }
        }
    }
    Ok(())
}

fn c_roi_constant_map() -> CheckResult {
    let fm = FeatureMap::new(T::filled(&[2, 5, 5], 0.375), 8.0);
    let boxes = BoxSet::new(40.0, 40.0, vec![BBox::new(6.3, 4.9, 27.2, 31.6)]);
    let pooled = roi_align(&fm, &boxes, 3, 2);
    for v in pooled.data.data() {
        close(*v, 0.375, 1e-12, "pooled value over a constant map")?;
    }
    Ok(())
}

fn c_head_mask_saturation() -> CheckResult {
    let mut rng = Rng::new(41);
    let mut mask: BottleneckMask<f64> = BottleneckMask::init(8, 2, 8, &mut rng, "m");
    mask.fc2.w.assign(vec![0.0; 2 * 8]);
    mask.fc2.b.assign(vec![45.0; 8]);
    let q = rand_t(&mut rng, &[3, 8], -1.0, 1.0);
    let rf = rand_t(&mut rng, &[3, 4, 8], -1.0, 1.0);
    let gated = rf.scale_channels(&mask.mask(&q));
    ensure(
        gated.data() == rf.data(),
        "saturated masks failed to gate bitwise-identically".to_string(),
    )
}

fn c_matcher_brute_force() -> CheckResult {
    let mut rng = Rng::new(51);
    for trial in 0..10 {
        let n = 2 + (trial % 4);
        let m = 1 + trial % n;
        let data: Vec<f64> = (0..n * m).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let cost = T::constant(&[n, m], data.clone());
        let got = hungarian(&cost).map_err(|e| format!("solver: {}", e))?;
        let (_, want_total) = brute_force_assignment(&data, n, m);
        let got_total: f64 = got
            .assignment
            .iter()
            .map(|&(p, t)| data[p * m + t])
            .sum();
        close(
            got_total,
            want_total,
            1e-9,
            &format!("assignment cost on trial {}", trial),
        )?;
    }
    Ok(())
}

fn c_pipeline_severed_handoff() -> CheckResult {
    let cfg = DetectorConfig {
        num_queries: 3,
        d_model: 8,
        heads: 2,
        num_stages: 2,
        num_classes: 1,
        dcw_enabled: true,
        disentangle_mode: DisentangleMode::Dcw,
        pooled_size: 3,
        samples_per_bin: 2,
        ..DetectorConfig::default()
    };
    let mut rng = Rng::new(52);
    let state = ModelState::<f64>::init(&cfg, &mut rng).map_err(|e| e.to_string())?;
    let fm = FeatureMap::new(rand_t(&mut rng, &[8, 4, 4], -1.0, 1.0), 8.0);
    let outs = forward(&fm, &state, &cfg).map_err(|e| e.to_string())?;
    // A loss read only from the second stage must leave the first stage's
    // box delta head untouched: refined boxes cross the stage boundary as
    // plain data.
    let loss = outs[1].class_logits.sum();
    for p in state.params() {
        p.tensor().clear_grad();
    }
    loss.backward().map_err(|e| e.to_string())?;
    let box_head = state
        .params()
        .into_iter()
        .find(|p| p.name == "s0.box_head.w")
        .expect("stage-0 box head");
    ensure(
        box_head.tensor().grad().is_none(),
        "a stage-2 loss reached the stage-1 box head through the handoff".to_string(),
    )
}

fn c_pipeline_training_reduces_loss() -> CheckResult {
    let cfg = DetectorConfig {
        num_queries: 4,
        d_model: 8,
        heads: 2,
        num_stages: 2,
        num_classes: 1,
        dcw_enabled: true,
        disentangle_mode: DisentangleMode::Dcw,
        pooled_size: 3,
        samples_per_bin: 2,
        ..DetectorConfig::default()
    };
    let spec = SceneSpec {
        seed: 9,
        min_objects: 2,
        max_objects: 2,
        ..SceneSpec::default()
    };
    let scene: Scene<f64> =
        generate_scene(&spec, cfg.d_model, 8.0).map_err(|e| e.to_string())?;
    let mut rng = Rng::new(53);
    let mut state = ModelState::init(&cfg, &mut rng).map_err(|e| e.to_string())?;
    let mut opt = Optimizer::new(0.02);
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..8 {
        last = train_step(&scene.feature_map, &scene.targets, &mut state, &cfg, &mut opt)
            .map_err(|e| e.to_string())?;
        first.get_or_insert(last);
    }
    let first = first.unwrap();
    ensure(
        last < first,
        format!("loss went from {} to {} over 8 repeated steps", first, last),
    )
}

fn c_synth_reproducible() -> CheckResult {
    let spec = SceneSpec {
        seed: 14,
        ..SceneSpec::default()
    };
    let a: Scene<f64> = generate_scene(&spec, 8, 8.0).map_err(|e| e.to_string())?;
    let b: Scene<f64> = generate_scene(&spec, 8, 8.0).map_err(|e| e.to_string())?;
    ensure(
        a.feature_map.data.data() == b.feature_map.data.data()
            && a.targets.boxes.len() == b.targets.boxes.len(),
        "same spec produced different scenes".to_string(),
    )
}

fn c_synth_ap_hand_cases() -> CheckResult {
    let target = BBox::new(10.0, 10.0, 30.0, 30.0);
    let frame = |boxes: Vec<BBox<f64>>| BoxSet::new(64.0, 64.0, boxes);
    let perfect = vec![(
        Detections::new(frame(vec![target]), vec![0.9]),
        Targets::new(frame(vec![target]), vec![0]),
    )];
    let ap = evaluate_ap(&perfect, 0.5).map_err(|e| e.to_string())?;
    close(ap, 1.0, 0.0, "perfect prediction ap")?;

    let late = vec![(
        Detections::new(
            frame(vec![BBox::new(40.0, 40.0, 50.0, 50.0), target]),
            vec![0.9, 0.6],
        ),
        Targets::new(frame(vec![target]), vec![0]),
    )];
    let ap = evaluate_ap(&late, 0.5).map_err(|e| e.to_string())?;
    close(ap, 0.5, 0.0, "wrong-then-right ap")?;

    match evaluate_ap::<f64>(
        &[(
            Detections::new(frame(vec![target]), vec![0.9]),
            Targets::new(frame(vec![]), vec![]),
        )],
        0.5,
    ) {
        Err(Error::Input(_)) => Ok(()),
        other => Err(format!(
            "zero targets should be an input error, got {:?}",
            other.map(|v| v)
        )),
    }
}

fn c_synth_scene_roundtrip() -> CheckResult {
    let dir = scratch_dir("scene")?;
    let res = (|| -> CheckResult {
        let spec = SceneSpec {
            seed: 15,
            ..SceneSpec::default()
        };
        let scene: Scene<f64> = generate_scene(&spec, 8, 8.0).map_err(|e| e.to_string())?;
        scene.save(&dir).map_err(|e| format!("save: {}", e))?;
        let back: Scene<f64> = Scene::load(&dir).map_err(|e| format!("load: {}", e))?;
        ensure(
            back.feature_map.data.data() == scene.feature_map.data.data()
                && back.targets.classes == scene.targets.classes,
            "scene changed across the file roundtrip".to_string(),
        )
    })();
    let _ = fs::remove_dir_all(&dir);
    res
}

pub fn checks() -> Vec<Check> {
    macro_rules! c {
        ($module:literal, $name:literal, $f:ident) => {
            Check {
                module: $module,
                name: $name,
                run: $f,
            }
        };
    }
    vec![
        c!("rng", "splitmix64 reference outputs", c_rng_reference),
        c!("rng", "unit draws stay in [0,1)", c_rng_unit_interval),
        c!("tensor", "arithmetic gradients", c_tensor_arithmetic_grads),
        c!("tensor", "softmax rows sum to one", c_tensor_softmax_rows),
        c!("tensor", "layer norm ignores constant shifts", c_tensor_layer_norm_shift),
        c!("tensor", "checkpoint file roundtrip", c_tensor_checkpoint_roundtrip),
        c!("geometry", "iou and giou hand values", c_geometry_hand_values),
        c!("geometry", "giou range and iou bound", c_geometry_giou_range),
        c!("geometry", "hull-penalty sign flip is caught", c_geometry_sign_flip_caught),
        c!("attention", "all-ones weighting reduces to plain attention", c_attention_reduction),
        c!("attention", "enhanced rows normalize and ignore shifts", c_attention_rows_and_shift),
        c!("attention", "two-query hand value", c_attention_hand_value),
        c!("roi_align", "matches dense-sampling oracle", c_roi_dense_oracle),
        c!("roi_align", "constant map pools to the constant", c_roi_constant_map),
        c!("dynamic_head", "saturated masks gate nothing", c_head_mask_saturation),
        c!("matcher", "assignment matches brute force", c_matcher_brute_force),
        c!("pipeline", "box handoff carries no gradient", c_pipeline_severed_handoff),
        c!("pipeline", "repeated steps reduce the loss", c_pipeline_training_reduces_loss),
        c!("synth", "scene generation is reproducible", c_synth_reproducible),
        c!("synth", "average precision hand cases", c_synth_ap_hand_cases),
        c!("synth", "scene files roundtrip", c_synth_scene_roundtrip),
    ]
}

pub fn run_all() -> Vec<Outcome> {
    checks()
        .into_iter()
        .map(|c| Outcome {
            module: c.module,
            name: c.name,
            failure: (c.run)().err(),
        })
        .collect()
}

/// Per-module pass/fail table; failures carry the named property and detail.
pub fn render(outcomes: &[Outcome]) -> String {
    let mut out = String::new();
    let mut current = "";
    let mut failed = 0;
    for o in outcomes {
        if o.module != current {
            current = o.module;
            out.push_str(&format!("[{}]\n", current));
        }
        match &o.failure {
            None => out.push_str(&format!("  ok    {}\n", o.name)),
            Some(why) => {
                failed += 1;
                out.push_str(&format!("  FAIL  {}: {}\n", o.name, why));
            }
        }
    }
    out.push_str(&format!(
        "{} checks, {} failed\n",
        outcomes.len(),
        failed
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes_on_a_fresh_build() {
        for o in run_all() {
            assert!(
                o.failure.is_none(),
                "[{}] {}: {}",
                o.module,
                o.name,
                o.failure.unwrap()
            );
        }
    }

    #[test]
    fn report_names_the_failing_property() {
        let outcomes = vec![
            Outcome {
                module: "geometry",
                name: "iou and giou hand values",
                failure: None,
            },
            Outcome {
                module: "geometry",
                name: "giou range and iou bound",
                failure: Some("giou 1.2 outside [-1, 1]".into()),
            },
        ];
        let table = render(&outcomes);
        assert!(table.contains("FAIL  giou range and iou bound"));
        assert!(table.contains("2 checks, 1 failed"));
    }

    #[test]
    fn registry_covers_every_module() {
        let list = checks();
        for module in [
            "rng", "tensor", "geometry", "attention", "roi_align", "dynamic_head", "matcher",
            "pipeline", "synth",
        ] {
            assert!(
                list.iter().any(|c| c.module == module),
                "no checks registered for {}",
                module
            );
        }
    }
}
