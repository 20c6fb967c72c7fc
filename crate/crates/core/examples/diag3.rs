use sparsedet::harness::{evaluate_model, RunConfig};
use sparsedet::pipeline::{train_step_detailed, ModelState, Optimizer};
use sparsedet::rng::Rng;
use sparsedet::synth::generate_scene;

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let seed: u64 = a[1].parse().unwrap();
    let lr: f64 = a[2].parse().unwrap();
    let clip: f64 = a[3].parse().unwrap();
    let drop_frac: f64 = a[4].parse().unwrap();
    let steps: usize = a[5].parse().unwrap();
    let wd: f64 = a.get(6).map(|s| s.parse().unwrap()).unwrap_or(1e-4);

    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.steps = steps;
    if let Some(v) = a.get(7) {
        cfg.min_size = v.parse().unwrap();
    }
    if let Some(v) = a.get(8) {
        cfg.max_size = v.parse().unwrap();
    }
    if let Some(v) = a.get(9) {
        cfg.min_objects = v.parse().unwrap();
    }
    if let Some(v) = a.get(10) {
        cfg.max_objects = v.parse().unwrap();
    }
    if let Some(v) = a.get(11) {
        cfg.overlap_bias = v.parse().unwrap();
    }
    if let Some(v) = a.get(14) {
        cfg.samples_per_bin = v.parse().unwrap();
    }
    if let Some(v) = a.get(15) {
        cfg.stride = v.parse().unwrap();
    }
    let mut det = cfg.detector_config();
    if let Some(v) = a.get(12) {
        det.cost.lambda_giou = v.parse().unwrap();
    }
    if let Some(v) = a.get(13) {
        det.cost.lambda_l1 = v.parse().unwrap();
    }
    let mut rng = Rng::new(cfg.seed);
    let mut state = ModelState::<f64>::init(&det, &mut rng).unwrap();
    let mut opt = Optimizer::new(lr);
    opt.clip_norm = clip;
    opt.weight_decay = wd;
    let drop_at = (steps as f64 * drop_frac) as usize;
    let avg_from = steps - steps / 4;
    let mut avg: Vec<Vec<f64>> = Vec::new();
    let mut avg_n = 0usize;
    let mut sum = 0.0;
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
        let st = train_step_detailed(&scene.feature_map, &scene.targets, &mut state, &det, &mut opt)
            .unwrap();
        sum += st.loss;
        if step % 250 == 249 {
            println!("  s{} avg loss {:.3}", step + 1, sum / 250.0);
            sum = 0.0;
        }
        if step >= avg_from {
            let ps = state.params();
            if avg.is_empty() {
                avg = ps.iter().map(|p| vec![0.0; p.tensor().numel()]).collect();
            }
            for (acc, p) in avg.iter_mut().zip(&ps) {
                for (s, v) in acc.iter_mut().zip(p.tensor().data()) {
                    *s += v;
                }
            }
            avg_n += 1;
        }
    }
    let ap = evaluate_model(&cfg, &state).unwrap();
    if avg_n > 0 && std::env::var("POLYAK").is_ok() {
        for (p, acc) in state.params_mut().into_iter().zip(&avg) {
            p.assign(acc.iter().map(|v| v / avg_n as f64).collect::<Vec<f64>>());
        }
        let ap2 = evaluate_model(&cfg, &state).unwrap();
        println!("  tail-averaged ap {:.4} (plain {:.4})", ap2, ap);
    }
    println!(
        "seed {} lr {} clip {} drop {} steps {} wd {}: ap {:.4}",
        seed, lr, clip, drop_frac, steps, wd, ap
    );
}
