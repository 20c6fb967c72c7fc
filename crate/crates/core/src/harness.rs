//! Run orchestration: layered run configuration, streamed-scene training
//! and evaluation, ablation grids, and machine-readable run records.
//!
//! Every run is a pure function of its configuration. Scene seeds derive
//! from the run seed (training step k draws scene `seed + k`; held-out
//! evaluation scenes live at `seed + 2^32 + i` so the streams never meet),
//! so a repeated run reproduces its output files byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::attention::AttnMode;
use crate::error::{Error, Result};
use crate::pipeline::{
    forward, train_step_detailed, DetectorConfig, DisentangleMode, ModelState, Optimizer,
};
use crate::rng::Rng;
use crate::roi_align::FeatureMap;
use crate::scalar::Scalar;
use crate::synth::{evaluate_ap, generate_scene, Detections, SceneSpec};

/// Offset between the training and held-out scene seed ranges.
pub const EVAL_SEED_OFFSET: u64 = 1 << 32;
/// Matching threshold for every reported AP number.
pub const AP_IOU_THRESHOLD: f64 = 0.5;

/// Complete description of one run: model, optimization, and scene stream.
/// Field order here fixes the key order in serialized headers.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: usize,
    pub eval_scenes: usize,
    pub log_every: usize,
    pub lr: f64,
    pub num_queries: usize,
    pub d_model: usize,
    pub heads: usize,
    pub num_stages: usize,
    pub num_classes: usize,
    pub attn_mode: AttnMode,
    pub head_mode: DisentangleMode,
    pub pooled_size: usize,
    pub samples_per_bin: usize,
    pub image_w: usize,
    pub image_h: usize,
    pub stride: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub overlap_bias: f64,
}

impl Default for RunConfig {
    /// The reference training setup: a two-stage detector on 64x64 crowded
    /// rectangle scenes.
    fn default() -> Self {
        RunConfig {
            seed: 0,
            steps: 2000,
            eval_scenes: 200,
            log_every: 25,
            lr: 0.05,
            num_queries: 10,
            d_model: 32,
            heads: 4,
            num_stages: 2,
            num_classes: 1,
            attn_mode: AttnMode::IouEsa,
            head_mode: DisentangleMode::Dcw,
            pooled_size: 7,
            samples_per_bin: 2,
            image_w: 64,
            image_h: 64,
            stride: 8.0,
            min_objects: 2,
            max_objects: 5,
            min_size: 12,
            max_size: 28,
            overlap_bias: 0.3,
        }
    }
}

impl RunConfig {
    /// Ablation baseline: shorter runs on high-overlap scenes, where the
    /// attention variants actually separate.
    pub fn ablation_default() -> Self {
        RunConfig {
            steps: 300,
            eval_scenes: 50,
            overlap_bias: 0.8,
            ..RunConfig::default()
        }
    }

    pub fn detector_config(&self) -> DetectorConfig {
        DetectorConfig {
            num_queries: self.num_queries,
            d_model: self.d_model,
            heads: self.heads,
            num_stages: self.num_stages,
            num_classes: self.num_classes,
            attn_mode: self.attn_mode,
            dcw_enabled: self.head_mode == DisentangleMode::Dcw,
            disentangle_mode: self.head_mode,
            pooled_size: self.pooled_size,
            samples_per_bin: self.samples_per_bin,
            ..DetectorConfig::default()
        }
    }

    pub fn scene_spec(&self, seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            image_w: self.image_w,
            image_h: self.image_h,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            overlap_bias: self.overlap_bias,
            min_size: self.min_size,
            max_size: self.max_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.detector_config().validate()?;
        self.scene_spec(0).validate()?;
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive and finite",
                self.lr
            )));
        }
        if self.eval_scenes == 0 {
            return Err(Error::Config("eval_scenes must be at least 1".into()));
        }
        Ok(())
    }

    /// Applies one `key=value` setting; keys mirror the field names, plus
    /// `dcw` (on / off / half-dim / full-dim) and `scenes` for the
    /// evaluation scene count.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::Config(format!("key {}: cannot parse {:?}", key, value))
            })
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "eval_scenes" | "scenes" => self.eval_scenes = num(key, value)?,
            "log_every" => self.log_every = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "num_queries" => self.num_queries = num(key, value)?,
            "d_model" => self.d_model = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "num_stages" => self.num_stages = num(key, value)?,
            "num_classes" => self.num_classes = num(key, value)?,
            "attn_mode" => self.attn_mode = AttnMode::parse(value)?,
            "dcw" => self.head_mode = parse_head_mode(value)?,
            "head_mode" => self.head_mode = DisentangleMode::parse(value)?,
            "pooled_size" => self.pooled_size = num(key, value)?,
            "samples_per_bin" => self.samples_per_bin = num(key, value)?,
            "image_w" => self.image_w = num(key, value)?,
            "image_h" => self.image_h = num(key, value)?,
            "stride" => self.stride = num(key, value)?,
            "min_objects" => self.min_objects = num(key, value)?,
            "max_objects" => self.max_objects = num(key, value)?,
            "min_size" => self.min_size = num(key, value)?,
            "max_size" => self.max_size = num(key, value)?,
            "overlap_bias" => self.overlap_bias = num(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown config key {:?}", other)));
            }
        }
        Ok(())
    }

    /// Layers `key=value` lines from a file over `self`. Blank lines and
    /// `#` comments are skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{} line {}: expected key=value, got {:?}",
                    path.display(),
                    i + 1,
                    line
                ))
            })?;
            self.apply(key.trim(), value.trim()).map_err(|e| {
                Error::Config(format!("{} line {}: {}", path.display(), i + 1, e))
            })?;
        }
        Ok(())
    }

    /// Precedence: `base` defaults, then the optional file, then overrides.
    pub fn layered(
        base: RunConfig,
        file: Option<&Path>,
        overrides: &[(&str, String)],
    ) -> Result<RunConfig> {
        let mut cfg = base;
        if let Some(path) = file {
            cfg.apply_file(path)?;
        }
        for (key, value) in overrides {
            cfg.apply(key, value)?;
        }
        Ok(cfg)
    }
}

/// The channel-gating flag: `on` and `off` switch between the gated head
/// and the shared baseline; the split-head variants are accepted by name.
pub fn parse_head_mode(value: &str) -> Result<DisentangleMode> {
    match value {
        "on" => Ok(DisentangleMode::Dcw),
        "off" => Ok(DisentangleMode::Entangled),
        other => DisentangleMode::parse(other),
    }
}

/// One logged event. Training records carry the loss breakdown; the final
/// evaluation record carries AP. Wall time is printed for humans but kept
/// out of the serialized form so identical runs produce identical files.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub stage_losses: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap: Option<f64>,
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Append-only JSON-lines writer: one effective-config header object, then
/// one record per line with strictly increasing step numbers.
pub struct RunLog {
    out: BufWriter<fs::File>,
    last_step: Option<usize>,
}

impl RunLog {
    pub fn create(path: &Path, cfg: &RunConfig) -> Result<Self> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut out = BufWriter::new(fs::File::create(path)?);
        let header = serde_json::json!({ "config": cfg });
        writeln!(out, "{}", header)?;
        out.flush()?;
        Ok(RunLog {
            out,
            last_step: None,
        })
    }

    pub fn push(&mut self, rec: &RunRecord) -> Result<()> {
        if let Some(last) = self.last_step {
            assert!(
                rec.step > last,
                "run log steps must increase: {} after {}",
                rec.step,
                last
            );
        }
        self.last_step = Some(rec.step);
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::Contract(format!("record does not serialize: {}", e)))?;
        writeln!(self.out, "{}", line)?;
        self.out.flush()?;
        Ok(())
    }
}

/// Final state of a training run.
pub struct TrainOutcome {
    pub state: ModelState<f64>,
    pub ap: f64,
    pub final_loss: Option<f64>,
}

/// Scored boxes from the final cascade stage: sigmoid of each slot's best
/// class logit against the stage's clamped boxes.
pub fn detect<S: Scalar>(
    fm: &FeatureMap<S>,
    state: &ModelState<S>,
    cfg: &DetectorConfig,
) -> Result<Detections<S>> {
    let outs = forward(fm, state, cfg)?;
    let last = outs.last().expect("detector has at least one stage");
    let logits = last.class_logits.data();
    let c = cfg.num_classes;
    let scores: Vec<f64> = (0..cfg.num_queries)
        .map(|i| {
            let best = logits[i * c..(i + 1) * c]
                .iter()
                .map(|v| v.to_f())
                .fold(f64::NEG_INFINITY, f64::max);
            1.0 / (1.0 + (-best).exp())
        })
        .collect();
    Ok(Detections::new(last.boxes.clone(), scores))
}

/// AP at [`AP_IOU_THRESHOLD`] over the held-out scene range.
pub fn evaluate_model(cfg: &RunConfig, state: &ModelState<f64>) -> Result<f64> {
    let det = cfg.detector_config();
    let mut pairs = Vec::with_capacity(cfg.eval_scenes);
    for i in 0..cfg.eval_scenes {
        let seed = cfg
            .seed
            .wrapping_add(EVAL_SEED_OFFSET)
            .wrapping_add(i as u64);
        let scene = generate_scene::<f64>(&cfg.scene_spec(seed), cfg.d_model, cfg.stride)?;
        let dets = detect(&scene.feature_map, state, &det)?;
        pairs.push((dets, scene.targets));
    }
    evaluate_ap(&pairs, AP_IOU_THRESHOLD)
}

/// Trains on streamed scenes, logs records, evaluates held-out AP.
/// The learning rate drops by 10x at three quarters of the step budget.
pub fn run_training(
    cfg: &RunConfig,
    mut log: Option<&mut RunLog>,
    progress: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let det = cfg.detector_config();
    let mut rng = Rng::new(cfg.seed);
    let mut state = ModelState::init(&det, &mut rng)?;
    let mut opt = Optimizer::new(cfg.lr);
    let drop_at = cfg.steps * 3 / 4;
    let t0 = Instant::now();
    let mut final_loss = None;
    for step in 0..cfg.steps {
        if step == drop_at && step > 0 {
            opt.lr = cfg.lr * 0.1;
        }
        let scene = generate_scene::<f64>(
            &cfg.scene_spec(cfg.seed.wrapping_add(step as u64)),
            cfg.d_model,
            cfg.stride,
        )?;
        let stats =
            train_step_detailed(&scene.feature_map, &scene.targets, &mut state, &det, &mut opt)?;
        final_loss = Some(stats.loss);
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            let rec = RunRecord {
                step,
                loss: Some(stats.loss),
                stage_losses: stats.stage_losses,
                grad_norm: Some(stats.grad_norm),
                ap: None,
                wall_time_s: t0.elapsed().as_secs_f64(),
            };
            if let Some(l) = log.as_deref_mut() {
                l.push(&rec)?;
            }
            if progress {
                println!(
                    "step {:5}  loss {:8.4}  grad {:8.3}  [{:.1}s]",
                    rec.step,
                    rec.loss.unwrap(),
                    rec.grad_norm.unwrap(),
                    rec.wall_time_s
                );
            }
        }
    }
    let ap = evaluate_model(cfg, &state)?;
    let rec = RunRecord {
        step: cfg.steps,
        loss: None,
        stage_losses: Vec::new(),
        grad_norm: None,
        ap: Some(ap),
        wall_time_s: t0.elapsed().as_secs_f64(),
    };
    if let Some(l) = log.as_deref_mut() {
        l.push(&rec)?;
    }
    if progress {
        println!(
            "eval  ap@{} {:.4} over {} scenes  [{:.1}s]",
            AP_IOU_THRESHOLD, ap, cfg.eval_scenes, rec.wall_time_s
        );
    }
    Ok(TrainOutcome {
        state,
        ap,
        final_loss,
    })
}

/// Trains per config, writes `runs.jsonl` and `checkpoint.bin` under
/// `out_dir`, and returns the held-out AP.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<f64> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let runs = out_dir.join("runs.jsonl");
    let mut log = RunLog::create(&runs, cfg)?;
    let outcome = run_training(cfg, Some(&mut log), true)?;
    let ckpt = out_dir.join("checkpoint.bin");
    outcome.state.save(&ckpt)?;
    println!("wrote {} and {}", runs.display(), ckpt.display());
    Ok(outcome.ap)
}

/// Loads `checkpoint.bin` from `out_dir` (the model shape comes from the
/// config), evaluates held-out AP, and appends a record to `eval.jsonl`.
pub fn cmd_eval(cfg: &RunConfig, out_dir: &Path) -> Result<f64> {
    cfg.validate()?;
    let det = cfg.detector_config();
    let mut rng = Rng::new(cfg.seed);
    let mut state = ModelState::<f64>::init(&det, &mut rng)?;
    state.load(&out_dir.join("checkpoint.bin"))?;
    let t0 = Instant::now();
    let ap = evaluate_model(cfg, &state)?;
    let mut log = RunLog::create(&out_dir.join("eval.jsonl"), cfg)?;
    log.push(&RunRecord {
        step: 0,
        loss: None,
        stage_losses: Vec::new(),
        grad_norm: None,
        ap: Some(ap),
        wall_time_s: t0.elapsed().as_secs_f64(),
    })?;
    println!("ap@{} {:.4} over {} scenes", AP_IOU_THRESHOLD, ap, cfg.eval_scenes);
    Ok(ap)
}

/// One ablation run: an attention mode, a head mode, and a seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationCell {
    pub attn_mode: AttnMode,
    pub dcw_enabled: bool,
    pub disentangle_mode: DisentangleMode,
    pub seed: u64,
}

impl AblationCell {
    pub fn new(attn_mode: AttnMode, head: DisentangleMode, seed: u64) -> Self {
        AblationCell {
            attn_mode,
            dcw_enabled: head == DisentangleMode::Dcw,
            disentangle_mode: head,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationGrid {
    pub cells: Vec<AblationCell>,
}

impl AblationGrid {
    /// Cartesian product of attention modes, head modes, and seeds.
    pub fn product(attn: &[AttnMode], heads: &[DisentangleMode], seeds: &[u64]) -> Self {
        let mut cells = Vec::with_capacity(attn.len() * heads.len() * seeds.len());
        for &a in attn {
            for &h in heads {
                for &s in seeds {
                    cells.push(AblationCell::new(a, h, s));
                }
            }
        }
        AblationGrid { cells }
    }

    /// The four configurations whose AP ordering the ablation table
    /// annotates: attention off, the IoU matrix standing in for attention,
    /// full attention, and IoU-enhanced attention with channel gating.
    pub fn ordering_cells(seeds: &[u64]) -> Self {
        let mut cells = Vec::with_capacity(4 * seeds.len());
        for &s in seeds {
            cells.push(AblationCell::new(AttnMode::NoMsa, DisentangleMode::Entangled, s));
            cells.push(AblationCell::new(AttnMode::IouAsAttn, DisentangleMode::Entangled, s));
            cells.push(AblationCell::new(AttnMode::FullMsa, DisentangleMode::Entangled, s));
            cells.push(AblationCell::new(AttnMode::IouEsa, DisentangleMode::Dcw, s));
        }
        AblationGrid { cells }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::Config("ablation grid has no cells".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.cells {
            if c.dcw_enabled != (c.disentangle_mode == DisentangleMode::Dcw) {
                return Err(Error::Config(format!(
                    "cell {}/{}: gating flag disagrees with the head mode",
                    c.attn_mode.as_str(),
                    c.disentangle_mode.as_str()
                )));
            }
            let key = (c.attn_mode.as_str(), c.disentangle_mode.as_str(), c.seed);
            if !seen.insert(key) {
                return Err(Error::Config(format!(
                    "duplicate ablation cell {}/{} seed {}",
                    key.0, key.1, key.2
                )));
            }
        }
        Ok(())
    }
}

/// Per-configuration summary: AP per seed (seed order) and the median.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub attn_mode: AttnMode,
    pub head_mode: DisentangleMode,
    pub aps: Vec<(u64, f64)>,
    pub median_ap: f64,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// Directional comparisons with pass/fail annotation; reported, never
    /// gating.
    pub notes: Vec<String>,
}

fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AblationTable {
    fn from_results(results: BTreeMap<(String, String), BTreeMap<u64, f64>>) -> Self {
        let rows: Vec<AblationRow> = results
            .into_iter()
            .map(|((attn, head), by_seed)| {
                let aps: Vec<(u64, f64)> = by_seed.into_iter().collect();
                let values: Vec<f64> = aps.iter().map(|&(_, v)| v).collect();
                AblationRow {
                    attn_mode: AttnMode::parse(&attn).expect("row key came from as_str"),
                    head_mode: DisentangleMode::parse(&head).expect("row key came from as_str"),
                    median_ap: median(&values),
                    aps,
                }
            })
            .collect();
        let mut table = AblationTable {
            rows,
            notes: Vec::new(),
        };
        table.annotate();
        table
    }

    fn find(&self, attn: AttnMode, head: DisentangleMode) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.attn_mode == attn && r.head_mode == head)
            .map(|r| r.median_ap)
    }

    /// Directional checks over the medians, mirroring the expectation that
    /// attention helps (none <= iou-matrix <= full) and that iou-enhanced
    /// attention plus channel gating at least matches full attention.
    fn annotate(&mut self) {
        let none = self.find(AttnMode::NoMsa, DisentangleMode::Entangled);
        let iou = self.find(AttnMode::IouAsAttn, DisentangleMode::Entangled);
        let full = self.find(AttnMode::FullMsa, DisentangleMode::Entangled);
        let esa = self.find(AttnMode::IouEsa, DisentangleMode::Dcw);
        if let (Some(n), Some(i), Some(f)) = (none, iou, full) {
            let ok = n <= i && i <= f;
            self.notes.push(format!(
                "ordering none <= iou <= full: {} ({:.4} / {:.4} / {:.4})",
                if ok { "PASS" } else { "FAIL" },
                n,
                i,
                f
            ));
        }
        if let (Some(f), Some(e)) = (full, esa) {
            let ok = e >= f;
            self.notes.push(format!(
                "iou-esa with gating >= full attention: {} ({:.4} vs {:.4})",
                if ok { "PASS" } else { "FAIL" },
                e,
                f
            ));
        }
    }

    /// CSV: a `#` config header, one row per configuration, then the
    /// directional notes as trailing `#` lines.
    pub fn to_csv(&self, cfg: &RunConfig) -> String {
        let mut out = String::new();
        out.push_str(&format!("# {}\n", serde_json::json!({ "config": cfg })));
        out.push_str("attn_mode,head_mode,seeds,median_ap,ap_per_seed\n");
        for r in &self.rows {
            let per_seed: Vec<String> = r
                .aps
                .iter()
                .map(|(s, v)| format!("{}:{:.4}", s, v))
                .collect();
            out.push_str(&format!(
                "{},{},{},{:.4},{}\n",
                r.attn_mode.as_str(),
                r.head_mode.as_str(),
                r.aps.len(),
                r.median_ap,
                per_seed.join(";")
            ));
        }
        for n in &self.notes {
            out.push_str(&format!("# {}\n", n));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:<10} {:>6} {:>10}\n",
            "attn", "head", "seeds", "median_ap"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<10} {:<10} {:>6} {:>10.4}\n",
                r.attn_mode.as_str(),
                r.head_mode.as_str(),
                r.aps.len(),
                r.median_ap
            ));
        }
        for n in &self.notes {
            out.push_str(&format!("{}\n", n));
        }
        out
    }
}

/// Trains every grid cell with shared settings (only attention mode, head
/// mode, and seed vary), evaluates each on its own held-out scenes, and
/// writes `ablation.csv` / `ablation.txt` under `out_dir` plus one run log
/// per cell. Results merge by sorted configuration key, so any execution
/// order produces identical files.
pub fn cmd_ablate(base: &RunConfig, grid: &AblationGrid, out_dir: &Path) -> Result<AblationTable> {
    grid.validate()?;
    base.validate()?;
    let cell_dir = out_dir.join("cells");
    fs::create_dir_all(&cell_dir)?;
    let mut results: BTreeMap<(String, String), BTreeMap<u64, f64>> = BTreeMap::new();
    for cell in &grid.cells {
        let mut cfg = base.clone();
        cfg.attn_mode = cell.attn_mode;
        cfg.head_mode = cell.disentangle_mode;
        cfg.seed = cell.seed;
        cfg.validate()?;
        let name = format!(
            "{}_{}_s{}.jsonl",
            cell.attn_mode.as_str(),
            cell.disentangle_mode.as_str(),
            cell.seed
        );
        let mut log = RunLog::create(&cell_dir.join(&name), &cfg)?;
        let outcome = run_training(&cfg, Some(&mut log), false)?;
        println!(
            "cell attn={} head={} seed={}  ap {:.4}",
            cell.attn_mode.as_str(),
            cell.disentangle_mode.as_str(),
            cell.seed,
            outcome.ap
        );
        results
            .entry((
                cell.attn_mode.as_str().to_string(),
                cell.disentangle_mode.as_str().to_string(),
            ))
            .or_default()
            .insert(cell.seed, outcome.ap);
    }
    let table = AblationTable::from_results(results);
    fs::write(out_dir.join("ablation.csv"), table.to_csv(base))?;
    fs::write(out_dir.join("ablation.txt"), table.to_text())?;
    print!("{}", table.to_text());
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    /// Small enough to train in milliseconds.
    fn tiny_run(seed: u64) -> RunConfig {
        RunConfig {
            seed,
            steps: 4,
            eval_scenes: 2,
            log_every: 2,
            lr: 0.02,
            num_queries: 4,
            d_model: 8,
            heads: 2,
            num_stages: 2,
            pooled_size: 3,
            image_w: 32,
            image_h: 32,
            min_objects: 1,
            max_objects: 2,
            min_size: 8,
            max_size: 14,
            ..RunConfig::default()
        }
    }

    #[test]
    fn layering_applies_defaults_then_file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# toy setup\nsteps = 17\nlr=0.25\nattn_mode = full\n\ndcw = off\n",
        )
        .unwrap();
        let cfg = RunConfig::layered(
            RunConfig::default(),
            Some(&path),
            &[("steps", "3".into()), ("dcw", "half-dim".into())],
        )
        .unwrap();
        assert_eq!(cfg.steps, 3);
        assert_eq!(cfg.lr, 0.25);
        assert_eq!(cfg.attn_mode, AttnMode::FullMsa);
        assert_eq!(cfg.head_mode, DisentangleMode::HalfDim);
        assert_eq!(cfg.d_model, 32);
    }

    #[test]
    fn bad_keys_values_and_lines_are_config_errors() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.apply("stepz", "3"), Err(Error::Config(_))));
        assert!(matches!(cfg.apply("steps", "three"), Err(Error::Config(_))));
        assert!(matches!(cfg.apply("dcw", "0.5-dim"), Err(Error::Config(_))));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cfg");
        std::fs::write(&path, "steps 12\n").unwrap();
        assert!(matches!(cfg.apply_file(&path), Err(Error::Config(_))));
    }

    #[test]
    fn gating_flag_maps_onto_head_modes() {
        assert_eq!(parse_head_mode("on").unwrap(), DisentangleMode::Dcw);
        assert_eq!(parse_head_mode("off").unwrap(), DisentangleMode::Entangled);
        assert_eq!(parse_head_mode("half-dim").unwrap(), DisentangleMode::HalfDim);
        assert_eq!(parse_head_mode("full-dim").unwrap(), DisentangleMode::FullDim);
    }

    #[test]
    fn train_output_is_byte_identical_across_runs() {
        let cfg = tiny_run(5);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let ap1 = cmd_train(&cfg, d1.path()).unwrap();
        let ap2 = cmd_train(&cfg, d2.path()).unwrap();
        assert_eq!(ap1, ap2);
        let runs1 = std::fs::read(d1.path().join("runs.jsonl")).unwrap();
        let runs2 = std::fs::read(d2.path().join("runs.jsonl")).unwrap();
        assert!(!runs1.is_empty());
        assert_eq!(runs1, runs2, "run logs differ between identical runs");
        let c1 = std::fs::read(d1.path().join("checkpoint.bin")).unwrap();
        let c2 = std::fs::read(d2.path().join("checkpoint.bin")).unwrap();
        assert_eq!(c1, c2, "checkpoints differ between identical runs");
    }

    #[test]
    fn run_log_lines_parse_individually_with_config_header() {
        let cfg = tiny_run(7);
        let dir = tempfile::tempdir().unwrap();
        cmd_train(&cfg, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("runs.jsonl")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        // Header, records at steps 0 and 2, the forced final record at
        // step 3, and the evaluation record.
        assert_eq!(lines.len(), 5);
        let header: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(header["config"]["steps"], 4);
        assert_eq!(header["config"]["attn_mode"], "iou-esa");
        let mut prev = -1i64;
        for line in &lines[1..] {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let step = v["step"].as_i64().unwrap();
            assert!(step > prev, "steps not increasing: {} after {}", step, prev);
            prev = step;
        }
        let last: serde_json::Value = serde_json::from_str(lines[4]).unwrap();
        assert!(last["ap"].is_number());
        assert!(last.get("loss").is_none());
        assert!(last.get("wall_time_s").is_none());
    }

    #[test]
    fn zero_steps_evaluates_the_untrained_model() {
        let mut cfg = tiny_run(9);
        cfg.steps = 0;
        let dir = tempfile::tempdir().unwrap();
        let ap = cmd_train(&cfg, dir.path()).unwrap();
        assert!((0.0..=1.0).contains(&ap));
        let text = std::fs::read_to_string(dir.path().join("runs.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 2, "header plus one eval record");
    }

    #[test]
    fn eval_reloads_the_checkpoint_and_reproduces_ap() {
        let cfg = tiny_run(11);
        let dir = tempfile::tempdir().unwrap();
        let trained_ap = cmd_train(&cfg, dir.path()).unwrap();
        let eval_ap = cmd_eval(&cfg, dir.path()).unwrap();
        assert_eq!(trained_ap, eval_ap);
    }

    #[test]
    fn detect_scores_one_per_query_inside_unit_interval() {
        let cfg = tiny_run(13);
        let det = cfg.detector_config();
        let mut rng = Rng::new(cfg.seed);
        let state = ModelState::<f64>::init(&det, &mut rng).unwrap();
        let scene =
            generate_scene::<f64>(&cfg.scene_spec(1), cfg.d_model, cfg.stride).unwrap();
        let dets = detect(&scene.feature_map, &state, &det).unwrap();
        assert_eq!(dets.scores.len(), det.num_queries);
        assert_eq!(dets.boxes.len(), det.num_queries);
        for s in &dets.scores {
            assert!((0.0..=1.0).contains(s), "score {} outside [0, 1]", s);
        }
        for b in &dets.boxes.boxes {
            assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 32.0 && b.y2 <= 32.0);
        }
    }

    #[test]
    fn grid_validation_rejects_duplicates_and_flag_mismatch() {
        let seeds = [0, 1];
        let grid = AblationGrid::ordering_cells(&seeds);
        assert_eq!(grid.cells.len(), 8);
        grid.validate().unwrap();

        let mut dup = grid.clone();
        dup.cells.push(dup.cells[0]);
        assert!(matches!(dup.validate(), Err(Error::Config(_))));

        let mut mismatched = grid.clone();
        mismatched.cells[0].dcw_enabled = true;
        assert!(matches!(mismatched.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn ablation_merges_identically_regardless_of_cell_order() {
        let base = RunConfig {
            steps: 2,
            eval_scenes: 2,
            overlap_bias: 0.8,
            ..tiny_run(3)
        };
        let grid = AblationGrid::product(
            &[AttnMode::FullMsa, AttnMode::IouEsa],
            &[DisentangleMode::Dcw],
            &[0, 1],
        );
        let mut reversed = grid.clone();
        reversed.cells.reverse();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        cmd_ablate(&base, &grid, d1.path()).unwrap();
        cmd_ablate(&base, &reversed, d2.path()).unwrap();
        let csv1 = std::fs::read(d1.path().join("ablation.csv")).unwrap();
        let csv2 = std::fs::read(d2.path().join("ablation.csv")).unwrap();
        assert!(!csv1.is_empty());
        assert_eq!(csv1, csv2, "cell order leaked into the merged table");
    }

    #[test]
    fn ablation_table_shape_and_annotations() {
        let base = RunConfig {
            steps: 2,
            eval_scenes: 2,
            overlap_bias: 0.8,
            ..tiny_run(3)
        };
        let grid = AblationGrid::ordering_cells(&[0, 1, 2]);
        let dir = tempfile::tempdir().unwrap();
        let table = cmd_ablate(&base, &grid, dir.path()).unwrap();
        assert_eq!(table.rows.len(), 4);
        for r in &table.rows {
            assert_eq!(r.aps.len(), 3, "each configuration sees every seed");
        }
        assert_eq!(table.notes.len(), 2);
        for n in &table.notes {
            assert!(
                n.contains("PASS") || n.contains("FAIL"),
                "note lacks annotation: {}",
                n
            );
        }
        let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
        assert!(csv.starts_with("# {\"config\""));
        assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 5);
        for cell in &grid.cells {
            let name = format!(
                "{}_{}_s{}.jsonl",
                cell.attn_mode.as_str(),
                cell.disentangle_mode.as_str(),
                cell.seed
            );
            assert!(dir.path().join("cells").join(name).exists());
        }
    }

    #[test]
    fn median_of_odd_and_even_sets() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[5.0]), 5.0);
    }

    #[test]
    fn perfect_synthetic_detections_reach_unit_ap() {
        // evaluate_model plumbing sanity: a detector oracle that returns
        // the ground truth should score AP 1 regardless of weights.
        let cfg = tiny_run(17);
        let mut pairs = Vec::new();
        for i in 0..4u64 {
            let scene = generate_scene::<f64>(
                &cfg.scene_spec(cfg.seed.wrapping_add(EVAL_SEED_OFFSET).wrapping_add(i)),
                cfg.d_model,
                cfg.stride,
            )
            .unwrap();
            let boxes = scene.targets.boxes.clone();
            let n = boxes.len();
            pairs.push((
                Detections::new(boxes, vec![0.9; n]),
                scene.targets,
            ));
        }
        assert_eq!(evaluate_ap(&pairs, AP_IOU_THRESHOLD).unwrap(), 1.0);
        let _ = BBox::new(0.0, 0.0, 1.0, 1.0);
    }
}
