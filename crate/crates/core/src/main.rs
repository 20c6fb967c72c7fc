//! Command-line front end: self checks, gradient verification, training,
//! evaluation, ablation grids, and a step-time benchmark.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use sparsedet::attention::AttnMode;
use sparsedet::error::Error;
use sparsedet::gradcheck::{self, Scope};
use sparsedet::harness::{
    cmd_ablate, cmd_eval, cmd_train, parse_head_mode, AblationGrid, RunConfig,
};
use sparsedet::pipeline::{forward, train_step_detailed, DisentangleMode, ModelState, Optimizer};
use sparsedet::rng::Rng;
use sparsedet::selfcheck;
use sparsedet::synth::generate_scene;

#[derive(Parser)]
#[command(
    name = "sparsedet",
    about = "Small sparse-query box detector trained on synthetic rectangle scenes",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// key=value config file layered over the built-in defaults
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// attention mode: full | none | iou | iou-esa
    #[arg(long = "attn-mode")]
    attn_mode: Option<String>,
    /// query-conditioned channel gating: on | off | half-dim | full-dim
    #[arg(long)]
    dcw: Option<String>,
    /// output directory for run files
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// held-out scene count for evaluation
    #[arg(long)]
    scenes: Option<usize>,
}

impl RunArgs {
    fn build(&self, base: RunConfig) -> Result<RunConfig, Error> {
        let mut overrides: Vec<(&str, String)> = Vec::new();
        if let Some(v) = self.seed {
            overrides.push(("seed", v.to_string()));
        }
        if let Some(v) = self.steps {
            overrides.push(("steps", v.to_string()));
        }
        if let Some(v) = &self.attn_mode {
            overrides.push(("attn_mode", v.clone()));
        }
        if let Some(v) = &self.dcw {
            overrides.push(("dcw", v.clone()));
        }
        if let Some(v) = self.scenes {
            overrides.push(("scenes", v.to_string()));
        }
        RunConfig::layered(base, self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the built-in property checks for every module
    Selftest,
    /// Compare analytic gradients against finite differences
    Gradcheck {
        /// primitives | modules | full
        #[arg(long, default_value = "full")]
        scope: String,
    },
    /// Train on streamed synthetic scenes and evaluate held-out AP
    Train(#[command(flatten)] RunArgs),
    /// Evaluate a saved checkpoint on held-out scenes
    Eval(#[command(flatten)] RunArgs),
    /// Train a grid of attention/gating variants and tabulate median AP
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// seeds per grid cell, starting at the base seed
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// comma-separated attention modes for a custom grid
        #[arg(long = "attn-modes")]
        attn_modes: Option<String>,
        /// comma-separated gating settings (on/off/half-dim/full-dim)
        #[arg(long = "dcw-modes")]
        dcw_modes: Option<String>,
    },
    /// Time forward passes and training steps on one scene
    Bench {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 20)]
        iters: usize,
    },
}

fn split_list(raw: &str) -> Vec<&str> {
    raw.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

fn run_selftest() -> Result<bool, Error> {
    let outcomes = selfcheck::run_all();
    print!("{}", selfcheck::render(&outcomes));
    Ok(outcomes.iter().all(|o| o.failure.is_none()))
}

fn run_gradcheck(scope: &str) -> Result<bool, Error> {
    let reports = gradcheck::run(Scope::parse(scope)?)?;
    let mut all_ok = true;
    let mut worst = 0.0f64;
    for r in &reports {
        println!(
            "{:<34} worst {:>12.4e}  tol {:.0e}  {}",
            r.name,
            r.worst,
            r.tol,
            if r.ok() { "ok" } else { "FAIL" }
        );
        all_ok &= r.ok();
        worst = worst.max(r.worst);
    }
    println!("{} checks, worst relative error {:.4e}", reports.len(), worst);
    Ok(all_ok)
}

fn run_ablate(
    run: &RunArgs,
    seeds: u64,
    attn_modes: &Option<String>,
    dcw_modes: &Option<String>,
) -> Result<bool, Error> {
    let base = run.build(RunConfig::ablation_default())?;
    let seed_list: Vec<u64> = (0..seeds).map(|i| base.seed.wrapping_add(i)).collect();
    if seed_list.is_empty() {
        return Err(Error::Config("need at least one ablation seed".into()));
    }
    let grid = if attn_modes.is_some() || dcw_modes.is_some() {
        let attn: Vec<AttnMode> = match attn_modes {
            Some(raw) => split_list(raw)
                .into_iter()
                .map(AttnMode::parse)
                .collect::<Result<_, _>>()?,
            None => vec![base.attn_mode],
        };
        let heads: Vec<DisentangleMode> = match dcw_modes {
            Some(raw) => split_list(raw)
                .into_iter()
                .map(parse_head_mode)
                .collect::<Result<_, _>>()?,
            None => vec![base.head_mode],
        };
        AblationGrid::product(&attn, &heads, &seed_list)
    } else {
        AblationGrid::ordering_cells(&seed_list)
    };
    cmd_ablate(&base, &grid, &run.out)?;
    Ok(true)
}

fn run_bench(run: &RunArgs, iters: usize) -> Result<bool, Error> {
    if iters == 0 {
        return Err(Error::Config("iters must be at least 1".into()));
    }
    let cfg = run.build(RunConfig::default())?;
    cfg.validate()?;
    let det = cfg.detector_config();
    let mut rng = Rng::new(cfg.seed);
    let mut state = ModelState::<f64>::init(&det, &mut rng)?;
    let scene = generate_scene::<f64>(&cfg.scene_spec(cfg.seed), cfg.d_model, cfg.stride)?;

    let t0 = Instant::now();
    for _ in 0..iters {
        forward(&scene.feature_map, &state, &det)?;
    }
    let fwd_ms = t0.elapsed().as_secs_f64() * 1e3 / iters as f64;

    let mut opt = Optimizer::new(cfg.lr);
    let t1 = Instant::now();
    for _ in 0..iters {
        train_step_detailed(&scene.feature_map, &scene.targets, &mut state, &det, &mut opt)?;
    }
    let step_ms = t1.elapsed().as_secs_f64() * 1e3 / iters as f64;

    println!(
        "forward {:.2} ms, train step {:.2} ms over {} iters (queries {}, d {}, stages {})",
        fwd_ms, step_ms, iters, cfg.num_queries, cfg.d_model, cfg.num_stages
    );
    Ok(true)
}

fn dispatch(cli: Cli) -> Result<bool, Error> {
    match &cli.cmd {
        Cmd::Selftest => run_selftest(),
        Cmd::Gradcheck { scope } => run_gradcheck(scope),
        Cmd::Train(run) => {
            cmd_train(&run.build(RunConfig::default())?, &run.out)?;
            Ok(true)
        }
        Cmd::Eval(run) => {
            cmd_eval(&run.build(RunConfig::default())?, &run.out)?;
            Ok(true)
        }
        Cmd::Ablate {
            run,
            seeds,
            attn_modes,
            dcw_modes,
        } => run_ablate(run, *seeds, attn_modes, dcw_modes),
        Cmd::Bench { run, iters } => run_bench(run, *iters),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Error::Config(msg)) => {
            eprintln!("config error: {}", msg);
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(1)
        }
    }
}
