use sparsedet::harness::{RunConfig, EVAL_SEED_OFFSET};
use sparsedet::pipeline::{forward, ModelState};
use sparsedet::rng::Rng;
use sparsedet::roi_align::FeatureMap;
use sparsedet::synth::generate_scene;
use sparsedet::tensor::Tensor;

fn spread(state: &ModelState<f64>, cfg: &RunConfig, label: &str) {
    let det = cfg.detector_config();
    let seed = cfg.seed.wrapping_add(EVAL_SEED_OFFSET);
    let scene = generate_scene::<f64>(&cfg.scene_spec(seed), cfg.d_model, cfg.stride).unwrap();
    let outs = forward(&scene.feature_map, state, &det).unwrap();
    let real = outs.last().unwrap();

    let zero_data = vec![0.0; scene.feature_map.data.data().len()];
    let zfm = FeatureMap::new(
        Tensor::constant(scene.feature_map.data.shape(), zero_data),
        cfg.stride,
    );
    let outs0 = forward(&zfm, state, &det).unwrap();
    let blank = outs0.last().unwrap();

    let db: f64 = real
        .boxes_raw
        .data()
        .iter()
        .zip(blank.boxes_raw.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let dl: f64 = real
        .class_logits
        .data()
        .iter()
        .zip(blank.class_logits.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("{}: max |d box| {:.4} px, max |d logit| {:.4}", label, db, dl);
}

fn main() {
    let cfg = RunConfig::default();
    let det = cfg.detector_config();
    let mut rng = Rng::new(cfg.seed);
    let mut state = ModelState::<f64>::init(&det, &mut rng).unwrap();
    spread(&state, &cfg, "fresh init");
    if let Some(p) = std::env::args().nth(1) {
        state.load(std::path::Path::new(&p)).unwrap();
        spread(&state, &cfg, "trained   ");
    }
}
