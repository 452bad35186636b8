//! Trains a small descriptorless model on one MNIST digit and writes overlay
//! previews and a checkpoint.
//!
//!     cargo run --release --example train_mnist -- [iterations] [out_dir]

use lmdis::data::{Dataset, DatasetSpec};
use lmdis::model::NetConfig;
use lmdis::nn::Resample;
use lmdis::training::{landmark_spread_px, TrainConfig, Trainer};

fn main() -> lmdis::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let iterations: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(1000);
    let out = std::path::PathBuf::from(args.next().unwrap_or_else(|| "runs/example_mnist".into()));

    let mut cfg = TrainConfig::default();
    cfg.dataset = DatasetSpec::mnist(Some(3));
    cfg.model.image_size = [56, 56];
    cfg.model.image_channels = 1;
    cfg.model.landmarks = 7;
    cfg.model.use_descriptors = false;
    cfg.model.detector_head_scale = 0.1;
    let net = NetConfig::new(&[8, 16, 32], &[1, 1, 1], Resample::Same);
    cfg.model.detector = net.clone();
    cfg.model.decoder = net;
    cfg.batch_size = 8;
    cfg.iterations = iterations;
    cfg.lr_decay_iters = [iterations * 7 / 10, iterations * 9 / 10];
    cfg.recon_increase_iters = [iterations * 3 / 10, iterations * 6 / 10];
    cfg.weights.lambda_recon = 0.001;
    cfg.weights.sigma_sep = 0.08;
    cfg.log_every = 100;
    cfg.output_dir = out.clone();

    let ds = Dataset::open(cfg.dataset.clone())?;
    let probe: Vec<_> = ds.load_batch(&(0..32).collect::<Vec<_>>()).into_iter().map(|p| p.1).collect();
    let mut trainer = Trainer::new(cfg)?;
    let before = landmark_spread_px(&trainer.model, &probe)?;
    trainer.run(&ds, iterations, Some(&out))?;
    let path = trainer.finish(&ds, &out)?;
    trainer.dump_overlay(&probe[..8], &out.join("final_overlay.png"))?;
    println!("spread {before:.2} px -> {:.2} px; model at {}", landmark_spread_px(&trainer.model, &probe)?, path.display());
    Ok(())
}
