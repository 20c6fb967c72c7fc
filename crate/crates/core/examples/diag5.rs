use sparsedet::geometry::iou;
use sparsedet::harness::{detect, RunConfig, EVAL_SEED_OFFSET};
use sparsedet::matcher::{cost_matrix, hungarian, set_loss_with_matches};
use sparsedet::pipeline::{forward, train_step_detailed, ModelState, Optimizer};
use sparsedet::rng::Rng;
use sparsedet::synth::generate_scene;

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let lr: f64 = a[1].parse().unwrap();
    let steps: usize = a[2].parse().unwrap();

    let mut cfg = RunConfig::default();
    cfg.steps = steps;
    let det = cfg.detector_config();
    let mut rng = Rng::new(cfg.seed);
    let mut state = ModelState::<f64>::init(&det, &mut rng).unwrap();
    let mut opt = Optimizer::new(lr);
    let drop_at = steps / 2;
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

    // loss decomposition: cls-only pass (zero box weights) vs full
    let mut full_sum = 0.0;
    let mut cls_sum = 0.0;
    let mut small = (0usize, 0usize);
    let mut large = (0usize, 0usize);
    let scenes = 60u64;
    for i in 0..scenes {
        let seed = cfg.seed.wrapping_add(EVAL_SEED_OFFSET).wrapping_add(i);
        let scene = generate_scene::<f64>(&cfg.scene_spec(seed), cfg.d_model, cfg.stride).unwrap();
        let outs = forward(&scene.feature_map, &state, &det).unwrap();
        let stages: Vec<_> = outs
            .iter()
            .map(|o| (o.class_logits.clone(), o.boxes_raw.clone()))
            .collect();
        let mut matches = Vec::new();
        for o in &outs {
            let c = cost_matrix(&o.class_logits, &o.boxes_raw, &scene.targets, &det.cost);
            matches.push(hungarian(&c).unwrap().assignment);
        }
        full_sum += set_loss_with_matches(&stages, &scene.targets, &matches, &det.cost).value();
        let mut cls_cost = det.cost.clone();
        cls_cost.lambda_l1 = 0.0;
        cls_cost.lambda_giou = 0.0;
        cls_sum += set_loss_with_matches(&stages, &scene.targets, &matches, &cls_cost).value();

        let d = detect(&scene.feature_map, &state, &det).unwrap();
        for t in &scene.targets.boxes.boxes {
            let mut best = 0.0f64;
            for q in 0..d.scores.len() {
                best = best.max(iou(&d.boxes.boxes[q], t));
            }
            let area = ((t.x2 - t.x1) * (t.y2 - t.y1)).sqrt();
            let slot = if area < 18.0 { &mut small } else { &mut large };
            slot.1 += 1;
            if best >= 0.5 {
                slot.0 += 1;
            }
        }
    }
    let n = scenes as f64;
    println!(
        "loss {:.3} = cls {:.3} + box {:.3} | coverage small {}/{} large {}/{}",
        full_sum / n,
        cls_sum / n,
        (full_sum - cls_sum) / n,
        small.0,
        small.1,
        large.0,
        large.1
    );
}
