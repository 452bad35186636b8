mod support;

use lmdis::data::{Dataset, DatasetSpec};
use lmdis::geometry::edge_length;
use lmdis::model::{stack_images, NetConfig};
use lmdis::nn::{Mode, Param, Resample};
use lmdis::training::{TrainConfig, Trainer};

fn small_mnist() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.dataset = DatasetSpec::mnist(Some(7));
    cfg.model.image_size = [56, 56];
    cfg.model.image_channels = 1;
    cfg.model.landmarks = 4;
    cfg.model.use_descriptors = false;
    let net = NetConfig::new(&[4, 8], &[1, 1], Resample::Same);
    cfg.model.detector = net.clone();
    cfg.model.decoder = net;
    cfg.batch_size = 8;
    cfg.finalize_batches = 2;
    cfg.log_every = 0;
    cfg
}

fn params(t: &mut Trainer) -> Vec<f32> {
    let mut out = Vec::new();
    t.model.visit_params(&mut |_: &str, p: &mut Param<f32>| out.extend(p.value.iter().copied()));
    out
}

#[test]
fn resuming_reproduces_an_uninterrupted_run() {
    let cfg = small_mnist();
    let ds = Dataset::open(cfg.dataset.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("half.safetensors");

    let mut straight = Trainer::new(cfg.clone()).unwrap();
    straight.run(&ds, 6, None).unwrap();

    let mut first = Trainer::new(cfg.clone()).unwrap();
    first.run(&ds, 3, None).unwrap();
    first.save_checkpoint(&ck).unwrap();
    let mut resumed = Trainer::resume(cfg, &ck).unwrap();
    assert_eq!(resumed.iteration, 3);
    resumed.run(&ds, 6, None).unwrap();

    let (a, b) = (params(&mut straight), params(&mut resumed));
    assert_eq!(a.len(), b.len());
    let worst = a.iter().zip(&b).fold(0.0f32, |m, (x, y)| m.max((x - y).abs()));
    assert!(worst <= 1e-6, "max parameter difference {worst:e}");
}

#[test]
fn short_run_lowers_the_loss() {
    let mut cfg = small_mnist();
    cfg.iterations = 500;
    let ds = Dataset::open(cfg.dataset.clone()).unwrap();
    let mut t = Trainer::new(cfg).unwrap();
    t.run(&ds, 20, None).unwrap();
    let head: f64 = t.history.iter().map(|r| r.losses.total).sum::<f64>() / t.history.len() as f64;
    t.run(&ds, 500, None).unwrap();
    let tail: Vec<f64> = t.history.iter().rev().take(20).map(|r| r.losses.total).collect();
    let tail = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(tail < head, "moving average {head} -> {tail}");
}

#[test]
fn desk_model_starts_with_landmarks_at_the_center() {
    let cfg = support::desk::load_config().unwrap();
    let ds = Dataset::open(cfg.dataset.clone()).unwrap();
    let t = Trainer::new(cfg).unwrap();
    let imgs: Vec<_> = ds.load_batch(&(0..32).collect::<Vec<_>>()).into_iter().map(|p| p.1).collect();
    let x = stack_images::<f32>(&imgs).unwrap();
    let (enc, _) = t.model.encode(x.view(), Mode::Eval).unwrap();
    let grid = t.model.map_size();
    let e = edge_length(grid);
    let center = [(grid.1 as f64 + 1.0) / 2.0, (grid.0 as f64 + 1.0) / 2.0];
    for lm in enc.landmarks.outer_iter().flat_map(|b| b.outer_iter().map(|p| p.to_owned()).collect::<Vec<_>>()) {
        let d = (lm[0] as f64 * e - center[0]).hypot(lm[1] as f64 * e - center[1]);
        assert!(d <= 0.1 * e, "landmark {d:.2} px from the center");
    }
}
