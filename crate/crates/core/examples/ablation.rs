//! Short runs with loss terms switched off, compared by landmark spread.
//!
//!     cargo run --release --example ablation -- [iterations]

use lmdis::data::{Dataset, DatasetSpec};
use lmdis::evaluation::{ablation_run, Term};
use lmdis::model::NetConfig;
use lmdis::nn::Resample;
use lmdis::training::TrainConfig;

fn main() -> lmdis::Result<()> {
    let iterations: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(300);
    let mut cfg = TrainConfig::default();
    cfg.dataset = DatasetSpec::mnist(Some(2));
    cfg.model.image_size = [56, 56];
    cfg.model.image_channels = 1;
    cfg.model.landmarks = 5;
    cfg.model.use_descriptors = false;
    cfg.model.detector_head_scale = 0.1;
    let net = NetConfig::new(&[8, 16], &[1, 1], Resample::Same);
    cfg.model.detector = net.clone();
    cfg.model.decoder = net;
    cfg.batch_size = 8;
    cfg.weights.lambda_recon = 0.001;
    cfg.log_every = 0;
    let ds = Dataset::open(cfg.dataset.clone())?;
    let table = ablation_run(&cfg, &[vec![], vec![Term::Sep], vec![Term::Conc]], iterations, &ds, None)?;
    for row in &table.rows {
        println!("disabled {:<12} spread {:.2} px", format!("{:?}", row.disabled), row.spread_px);
    }
    Ok(())
}
