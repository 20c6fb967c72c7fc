use sparsedet::geometry::iou;
use sparsedet::harness::{detect, RunConfig, EVAL_SEED_OFFSET};
use sparsedet::pipeline::{train_step_detailed, ModelState, Optimizer};
use sparsedet::rng::Rng;
use sparsedet::synth::{evaluate_ap, generate_scene, Detections};

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let lr: f64 = a[1].parse().unwrap();
    let drop_frac: f64 = a[2].parse().unwrap();
    let steps: usize = a[3].parse().unwrap();

    let mut cfg = RunConfig::default();
    cfg.steps = steps;
    let det = cfg.detector_config();
    let mut rng = Rng::new(cfg.seed);
    let mut state = ModelState::<f64>::init(&det, &mut rng).unwrap();
    let mut opt = Optimizer::new(lr);
    let drop_at = (steps as f64 * drop_frac) as usize;
    for step in 0..steps {
        if step == drop_at && step > 0 {
            opt.lr = lr * 0.1;
        }
        let scene = generate_scene::<f64>(
            &cfg.scene_spec(cfg.seed.wrapping_add(step as u64)),
            cfg.d_model,
            cfg.stride,
        )
        .unwrap();
        train_step_detailed(&scene.feature_map, &scene.targets, &mut state, &det, &mut opt)
            .unwrap();
    }

    let mut real = Vec::new();
    let mut oracle = Vec::new();
    let mut best_ious = Vec::new();
    let mut matched_scores = Vec::new();
    let mut unmatched_scores = Vec::new();
    for i in 0..cfg.eval_scenes as u64 {
        let seed = cfg.seed.wrapping_add(EVAL_SEED_OFFSET).wrapping_add(i);
        let scene = generate_scene::<f64>(&cfg.scene_spec(seed), cfg.d_model, cfg.stride).unwrap();
        let d = detect(&scene.feature_map, &state, &det).unwrap();
        let n = d.scores.len();
        let mut by_iou = vec![0.0f64; n];
        for q in 0..n {
            let mut best = 0.0f64;
            for t in &scene.targets.boxes.boxes {
                best = best.max(iou(&d.boxes.boxes[q], t));
            }
            by_iou[q] = best;
        }
        // per target: the best query iou (coverage quality)
        for t in &scene.targets.boxes.boxes {
            let mut best = 0.0f64;
            for q in 0..n {
                best = best.max(iou(&d.boxes.boxes[q], t));
            }
            best_ious.push(best);
        }
        for q in 0..n {
            if by_iou[q] >= 0.5 {
                matched_scores.push(d.scores[q]);
            } else {
                unmatched_scores.push(d.scores[q]);
            }
        }
        oracle.push((
            Detections::new(d.boxes.clone(), by_iou),
            scene.targets.clone(),
        ));
        real.push((d, scene.targets));
    }
    let ap_real = evaluate_ap(&real, 0.5).unwrap();
    let ap_oracle = evaluate_ap(&oracle, 0.5).unwrap();
    best_ious.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let cover = best_ious.iter().filter(|&&v| v >= 0.5).count() as f64 / best_ious.len() as f64;
    let med = best_ious[best_ious.len() / 2];
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    println!(
        "lr {} drop {} steps {}: ap {:.4} | oracle-ranked ap {:.4} | target coverage@0.5 {:.3} median best-iou {:.3} | score tp {:.3} fp {:.3}",
        lr, drop_frac, steps, ap_real, ap_oracle, cover, med,
        mean(&matched_scores), mean(&unmatched_scores)
    );
}
