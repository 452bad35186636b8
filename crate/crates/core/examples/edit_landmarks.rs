//! Encodes a digit, drags one landmark and decodes again: the landmark
//! coordinates are the whole representation of a descriptorless model.
//!
//!     cargo run --release --example edit_landmarks -- <model.safetensors> [out_dir]

use lmdis::checkpoint;
use lmdis::data::{Dataset, DatasetSpec};
use lmdis::model::{stack_images, unstack_images};
use lmdis::nn::Mode;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().unwrap_or_else(|| "runs/mnist_desk/model.safetensors".into());
    let out = args.next().unwrap_or_else(|| "edit_landmarks".into());
    std::fs::create_dir_all(&out)?;
    let model = checkpoint::load(&ckpt)?.model;
    let ds = Dataset::open(DatasetSpec::mnist(Some(3)))?;
    let x = stack_images::<f32>(&[ds.get(0)?])?;
    let (enc, _) = model.encode(x.view(), Mode::Eval)?;
    let desc = enc.descriptors.as_ref().map(|d| d.view());
    let (same, _) = model.decode(enc.landmarks.view(), desc, Mode::Eval)?;
    unstack_images(same.color.view())[0].save_png(format!("{out}/reconstruction.png"))?;

    for k in 0..model.landmarks() {
        let mut moved = enc.landmarks.clone();
        moved[[0, k, 0]] += 0.08;
        let (dec, _) = model.decode(moved.view(), enc.descriptors.as_ref().map(|d| d.view()), Mode::Eval)?;
        let delta = (&dec.color - &same.color).mapv(f32::abs).sum();
        unstack_images(dec.color.view())[0].save_png(format!("{out}/moved{k}.png"))?;
        println!("landmark {k} moved right: total |change| {delta:.2}");
    }
    println!("wrote {out}/");
    Ok(())
}
