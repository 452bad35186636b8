//! Desk-scale MNIST runs: one with the full objective and one without the
//! separation term. Finished runs are reused when their saved config matches.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lmdis::checkpoint;
use lmdis::data::Dataset;
use lmdis::evaluation::{ablate, Term};
use lmdis::model::Model;
use lmdis::raster::Image;
use lmdis::training::{equivariance_error_px, landmark_spread_px, RunSummary, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const EQV_LIMIT_PX: f64 = 1.5;
pub const SPREAD_GAIN: f64 = 5.0;
pub const COLLAPSE_RATIO: f64 = 0.3;
const PROBE_IMAGES: usize = 256;

pub fn config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/mnist_desk.toml")
}

pub struct RunOutcome {
    pub model: Model<f32>,
    pub info: RunSummary,
    /// Loaded from an earlier finished run.
    pub reused: bool,
}

/// Trains `cfg` to completion unless `cfg.output_dir` already holds a
/// finished run of the same config, e.g. one made with `lmdis train`.
pub fn train_or_reuse(cfg: &TrainConfig, dataset: &Dataset) -> lmdis::Result<RunOutcome> {
    let out = &cfg.output_dir;
    let model_path = out.join("model.safetensors");
    let saved = TrainConfig::load(out.join("config.toml")).ok();
    if let (true, Some(saved), Some(info)) = (model_path.exists(), saved, RunSummary::read(out)?) {
        if saved.same_run(cfg) && info.iterations == cfg.iterations {
            let model = checkpoint::load(&model_path)?.model;
            return Ok(RunOutcome { model, info, reused: true });
        }
    }
    let _ = fs::remove_file(out.join(RunSummary::FILE));
    let _ = fs::remove_file(out.join("progress.csv"));
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg.clone())?;
    trainer.run(dataset, cfg.iterations, Some(out))?;
    trainer.finish(dataset, out)?;
    let info = RunSummary { iterations: cfg.iterations, train_seconds: start.elapsed().as_secs_f64() };
    info.write(out)?;
    Ok(RunOutcome { model: trainer.model, info, reused: false })
}

pub struct DeskReport {
    pub initial_spread: f64,
    pub spread: f64,
    pub eqv_px: f64,
    pub nosep_spread: f64,
    pub full: RunSummary,
    pub nosep: RunSummary,
    pub reused: bool,
}

impl DeskReport {
    pub fn eqv_ok(&self) -> bool {
        self.eqv_px <= EQV_LIMIT_PX
    }

    pub fn spread_ok(&self) -> bool {
        self.spread >= SPREAD_GAIN * self.initial_spread
    }

    pub fn collapse_ok(&self) -> bool {
        self.nosep_spread < COLLAPSE_RATIO * self.spread
    }
}

pub fn load_config() -> lmdis::Result<TrainConfig> {
    let mut cfg = TrainConfig::load(config_path())?;
    if let Some(n) = std::env::var("LMDIS_DESK_ITERS").ok().and_then(|v| v.parse().ok()) {
        cfg.iterations = n;
        cfg.output_dir = cfg.output_dir.with_file_name(format!(
            "{}_{n}",
            cfg.output_dir.file_name().and_then(|s| s.to_str()).unwrap_or("desk")
        ));
    }
    Ok(cfg)
}

pub fn nosep_config(cfg: &TrainConfig) -> TrainConfig {
    let mut c = ablate(cfg, &[Term::Sep]);
    let name = cfg.output_dir.file_name().and_then(|s| s.to_str()).unwrap_or("desk");
    c.output_dir = cfg.output_dir.with_file_name(format!("{name}_nosep"));
    c
}

/// Runs (or reuses) both desk runs and measures them on the probe digits.
pub fn run(cfg: &TrainConfig) -> lmdis::Result<DeskReport> {
    let dataset = Dataset::open(cfg.dataset.clone())?;
    let n = dataset.len();
    // a fixed probe set; these digits are also in the training pool
    let probe: Vec<Image> = dataset.load_batch(&(n.saturating_sub(PROBE_IMAGES)..n).collect::<Vec<_>>()).into_iter().map(|p| p.1).collect();
    let initial = Trainer::new(cfg.clone())?;
    let initial_spread = landmark_spread_px(&initial.model, &probe)?;
    let full = train_or_reuse(cfg, &dataset)?;
    let nosep = train_or_reuse(&nosep_config(cfg), &dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xe9_0001);
    let eqv_px = equivariance_error_px(&full.model, &probe, &cfg.tps, &mut rng)?;
    Ok(DeskReport {
        initial_spread,
        spread: landmark_spread_px(&full.model, &probe)?,
        eqv_px,
        nosep_spread: landmark_spread_px(&nosep.model, &probe)?,
        full: full.info,
        nosep: nosep.info,
        reused: full.reused && nosep.reused,
    })
}
