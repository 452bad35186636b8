//! Optimization loop, schedules, augmentation and batch-norm finalization.

mod diagnostics;
mod trainer;

pub use diagnostics::{equivariance_error_px, landmark_spread_px, mean_pairwise_distance};
pub use trainer::{finalize_batchnorm, Batch, StepRecord, Trainer, HISTORY_LEN};

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::nn::AdamConfig;
use crate::raster::Image;
use crate::tps::TpsSampleConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Brightness offset drawn from `U(-brightness, brightness)`.
    pub brightness: f64,
    /// Contrast gain drawn from `U(contrast[0], contrast[1])`.
    pub contrast: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { enabled: true, brightness: 0.12, contrast: [0.8, 1.25] }
    }
}

/// Everything a training run needs; loaded from one TOML document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub iterations: u64,
    pub lr: f64,
    /// Iterations at which the learning rate drops ×0.1.
    pub lr_decay_iters: [u64; 2],
    /// Iterations at which `lambda_recon` grows ×10.
    pub recon_increase_iters: [u64; 2],
    /// Iterations before landmark control points may be used for TPS sampling.
    pub landmark_control_warmup: u64,
    pub finalize_batches: usize,
    pub log_every: u64,
    pub dump_every: u64,
    pub checkpoint_every: u64,
    pub output_dir: PathBuf,
    pub augment: AugmentConfig,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub tps: TpsSampleConfig,
    pub model: ModelConfig,
    pub dataset: DatasetSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 16,
            iterations: 300_000,
            lr: 1e-3,
            lr_decay_iters: [100_000, 200_000],
            recon_increase_iters: [100_000, 200_000],
            landmark_control_warmup: 5000,
            finalize_batches: 256,
            log_every: 100,
            dump_every: 1000,
            checkpoint_every: 5000,
            output_dir: PathBuf::from("runs/default"),
            augment: AugmentConfig::default(),
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            tps: TpsSampleConfig::default(),
            model: ModelConfig::default(),
            dataset: DatasetSpec::default(),
        }
    }
}

impl TrainConfig {
    /// Parses a TOML config. Relative dataset and output paths resolve
    /// against the config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.dataset.root.is_relative() {
            cfg.dataset.root = base.join(&cfg.dataset.root);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Equal apart from where the data and outputs live.
    pub fn same_run(&self, other: &TrainConfig) -> bool {
        let strip = |c: &TrainConfig| {
            let mut c = c.clone();
            c.output_dir = PathBuf::new();
            c.dataset.root = PathBuf::new();
            c
        };
        strip(self) == strip(other)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.tps.validate()?;
        self.dataset.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if ![8, 16, 32].contains(&self.batch_size) {
            log::warn!("batch size {} is outside the usual {{8, 16, 32}}", self.batch_size);
        }
        if self.lr_decay_iters[0] > self.lr_decay_iters[1] || self.recon_increase_iters[0] > self.recon_increase_iters[1] {
            return Err(Error::Config("decay and increase iterations must be nondecreasing".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.dataset.padded_size != self.model.image_size {
            return Err(Error::Config(format!(
                "model image_size {:?} must equal the dataset padded_size {:?}",
                self.model.image_size, self.dataset.padded_size
            )));
        }
        if self.dataset.channels != self.model.image_channels {
            return Err(Error::Config("model and dataset channel counts differ".into()));
        }
        let [lo, hi] = self.augment.contrast;
        if self.augment.brightness < 0.0 || !(lo > 0.0) || lo > hi {
            return Err(Error::Config("augmentation ranges are invalid".into()));
        }
        Ok(())
    }
}

/// Per-iteration hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr: f64,
    pub lambda_recon: f64,
    /// Probability of drawing landmark control points this iteration.
    pub landmark_mode_prob: f64,
}

pub fn schedule(iteration: u64, cfg: &TrainConfig) -> Schedule {
    let steps = |marks: [u64; 2]| marks.iter().filter(|&&m| iteration >= m).count() as i32;
    Schedule {
        lr: cfg.lr * 0.1f64.powi(steps(cfg.lr_decay_iters)),
        lambda_recon: cfg.weights.lambda_recon * 10f64.powi(steps(cfg.recon_increase_iters)),
        landmark_mode_prob: if iteration < cfg.landmark_control_warmup { 0.0 } else { cfg.tps.landmark_mode_prob },
    }
}

/// One brightness/contrast draw, shared by the frames of a pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub offset: f32,
    pub gain: f32,
}

impl Jitter {
    pub const IDENTITY: Self = Self { offset: 0.0, gain: 1.0 };

    pub fn draw<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let offset = if cfg.brightness > 0.0 { rng.gen_range(-cfg.brightness..=cfg.brightness) } else { 0.0 };
        let [lo, hi] = cfg.contrast;
        let gain = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        Self { offset: offset as f32, gain: gain as f32 }
    }

    /// Contrast about the image mean, then brightness, then clip to `[0, 1]`.
    pub fn apply(&self, img: &Image) -> Image {
        // (v - m) + m is not exact in f32
        if *self == Self::IDENTITY {
            return img.clone();
        }
        let m = img.mean();
        Image { data: img.data.mapv(|v| ((v - m) * self.gain + m + self.offset).clamp(0.0, 1.0)) }
    }
}

/// Random brightness and contrast jitter; grayscale images pass through.
pub fn augment<R: Rng + ?Sized>(img: &Image, cfg: &AugmentConfig, rng: &mut R) -> Image {
    if !cfg.enabled || img.channels() == 1 {
        return img.clone();
    }
    Jitter::draw(cfg, rng).apply(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_steps() {
        let cfg = TrainConfig::default();
        let s0 = schedule(0, &cfg);
        assert_eq!((s0.lr, s0.lambda_recon, s0.landmark_mode_prob), (1e-3, 0.01, 0.0));
        let s = schedule(150_000, &cfg);
        assert!((s.lr - 1e-4).abs() < 1e-15 && (s.lambda_recon - 0.1).abs() < 1e-12);
        assert_eq!(s.landmark_mode_prob, 0.3);
        assert!((schedule(250_000, &cfg).lr - 1e-5).abs() < 1e-16);
    }

    #[test]
    fn zero_jitter_is_identity() {
        let cfg = AugmentConfig { enabled: true, brightness: 0.0, contrast: [1.0, 1.0] };
        let img = Image { data: ndarray::Array3::from_shape_fn((3, 4, 4), |(c, i, j)| (c + i + j) as f32 / 12.0) };
        assert_eq!(augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(0)), img);
    }

    #[test]
    fn jitter_stays_in_range() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Image { data: ndarray::Array3::from_shape_fn((3, 5, 5), |(c, i, j)| ((c * 7 + i * 3 + j) % 11) as f32 / 10.0) };
        for _ in 0..200 {
            assert!(augment(&img, &cfg, &mut rng).data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn toml_round_trip() {
        let cfg = TrainConfig::default();
        let back: TrainConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}

/// Written as `run.json` beside the final model once a run completes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub iterations: u64,
    pub train_seconds: f64,
}

impl RunSummary {
    pub const FILE: &'static str = "run.json";

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(Self::FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// `None` when the directory holds no completed run.
    pub fn read(dir: &Path) -> Result<Option<Self>> {
        match std::fs::read_to_string(dir.join(Self::FILE)) {
            Ok(s) => Ok(Some(serde_json::from_str(&s)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }
}
