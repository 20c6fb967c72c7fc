use sparsedet::harness::{detect, evaluate_model, RunConfig, EVAL_SEED_OFFSET};
use sparsedet::pipeline::ModelState;
use sparsedet::rng::Rng;
use sparsedet::synth::generate_scene;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = &args[1];
    let cfg = RunConfig::default();
    let det = cfg.detector_config();
    let mut rng = Rng::new(cfg.seed);
    let mut state = ModelState::<f64>::init(&det, &mut rng).unwrap();
    state.load(std::path::Path::new(ckpt)).unwrap();

    for i in 0..3u64 {
        let seed = cfg.seed.wrapping_add(EVAL_SEED_OFFSET).wrapping_add(i);
        let scene = generate_scene::<f64>(&cfg.scene_spec(seed), cfg.d_model, cfg.stride).unwrap();
        println!("scene {}:", i);
        for b in &scene.targets.boxes.boxes {
            println!("  gt   ({:6.1} {:6.1} {:6.1} {:6.1})", b.x1, b.y1, b.x2, b.y2);
        }
        let d = detect(&scene.feature_map, &state, &det).unwrap();
        let mut idx: Vec<usize> = (0..d.scores.len()).collect();
        idx.sort_by(|&a, &b| d.scores[b].partial_cmp(&d.scores[a]).unwrap());
        for &q in &idx {
            let b = &d.boxes.boxes[q];
            println!(
                "  pred ({:6.1} {:6.1} {:6.1} {:6.1}) score {:.3}",
                b.x1, b.y1, b.x2, b.y2, d.scores[q]
            );
        }
    }
    let ap = evaluate_model(&cfg, &state).unwrap();
    println!("ap {:.4}", ap);
}
