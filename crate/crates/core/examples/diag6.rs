use sparsedet::harness::{evaluate_model, RunConfig};
use sparsedet::matcher::{cost_matrix, hungarian, set_loss_with_matches};
use sparsedet::pipeline::{forward, ModelState, Optimizer};
use sparsedet::rng::Rng;
use sparsedet::synth::generate_scene;
use sparsedet::tensor::Tensor;

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let seed: u64 = a[1].parse().unwrap();
    let lr: f64 = a[2].parse().unwrap();
    let drop_frac: f64 = a[3].parse().unwrap();
    let steps: usize = a[4].parse().unwrap();
    let batch: usize = a[5].parse().unwrap();
    let stride: f64 = a.get(6).map(|s| s.parse().unwrap()).unwrap_or(8.0);

    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.steps = steps;
    cfg.stride = stride;
    let det = cfg.detector_config();
    let mut rng = Rng::new(cfg.seed);
    let mut state = ModelState::<f64>::init(&det, &mut rng).unwrap();
    let mut opt = Optimizer::new(lr);
    let drop_at = (steps as f64 * drop_frac) as usize;
    let mut sum = 0.0;
    let t0 = std::time::Instant::now();
    for step in 0..steps {
        if step == drop_at && step > 0 {
            opt.lr = lr * 0.1;
        }
        let mut total: Option<Tensor<f64>> = None;
        for i in 0..batch {
            let sc_seed = cfg.seed.wrapping_add((step * batch + i) as u64);
            let scene =
                generate_scene::<f64>(&cfg.scene_spec(sc_seed), cfg.d_model, cfg.stride).unwrap();
            let outs = forward(&scene.feature_map, &state, &det).unwrap();
            let stages: Vec<_> = outs
                .iter()
                .map(|o| (o.class_logits.clone(), o.boxes_raw.clone()))
                .collect();
            let mut matches = Vec::new();
            for (logits, boxes) in &stages {
                let cm = cost_matrix(logits, boxes, &scene.targets, &det.cost);
                matches.push(hungarian(&cm).unwrap().assignment);
            }
            let l = set_loss_with_matches(&stages, &scene.targets, &matches, &det.cost);
            total = Some(match total {
                Some(t) => t.add(&l),
                None => l,
            });
        }
        let loss = total.unwrap().mul_scalar(1.0 / batch as f64);
        sum += loss.value();
        for p in state.params_mut() {
            p.tensor().clear_grad();
        }
        loss.backward().unwrap();
        let mut params = state.params_mut();
        opt.step(&mut params);
        if step % 250 == 249 {
            println!("  s{} avg loss {:.3} [{:.0}s]", step + 1, sum / 250.0, t0.elapsed().as_secs_f64());
            sum = 0.0;
        }
    }
    let ap = evaluate_model(&cfg, &state).unwrap();
    println!(
        "seed {} lr {} drop {} steps {} batch {} stride {}: ap {:.4} [{:.0}s]",
        seed, lr, drop_frac, steps, batch, stride, ap, t0.elapsed().as_secs_f64()
    );
}
