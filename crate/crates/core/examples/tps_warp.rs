//! Samples random thin-plate-spline warps and applies them to an MNIST digit.
//!
//!     cargo run --example tps_warp -- [out_dir]

use lmdis::data::{Dataset, DatasetSpec};
use lmdis::tps::{sample_random_tps, warp_image, Domain, TpsSampleConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> lmdis::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "tps_warp".into());
    std::fs::create_dir_all(&out)?;
    let ds = Dataset::open(DatasetSpec::mnist(Some(5)))?;
    let digit = ds.get(0)?;
    digit.save_png(format!("{out}/original.png"))?;
    let cfg = TpsSampleConfig::default();
    let domain = Domain::new(digit.height(), digit.width());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..6 {
        let (t, mode) = sample_random_tps(&cfg, None, &domain, &mut rng)?;
        warp_image(&digit, &t).save_png(format!("{out}/warp{i}.png"))?;
        println!("warp{i}: {mode:?} controls, affine {:?}", t.affine.map(|r| r.map(|v| (v * 1000.0).round() / 1000.0)));
    }
    println!("wrote {out}/");
    Ok(())
}
