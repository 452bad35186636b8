//! Exports bundled MNIST digits as an image folder with a manifest, then
//! validates and reopens it the way user datasets are read.
//!
//!     cargo run --example dataset_folder -- [out_dir]

use lmdis::data::{export_folder, validate_root, Dataset, DatasetSpec, PadMode};

fn main() -> lmdis::Result<()> {
    let root = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "mnist_folder".into()));
    let mnist = Dataset::open(DatasetSpec::mnist(Some(8)))?;
    let picks: Vec<usize> = (0..20).collect();
    let (names, images): (Vec<String>, Vec<_>) =
        mnist.load_batch(&picks).into_iter().map(|(i, img)| (format!("digit{i:02}.png"), img)).unzip();
    export_folder(&root, &names, &images)?;
    let report = validate_root(&root)?;
    println!("{report}");
    let spec = DatasetSpec {
        root: root.clone(),
        image_size: [56, 56],
        padded_size: [64, 64],
        pad: PadMode::Constant(0.0),
        channels: 1,
        ..Default::default()
    };
    let ds = Dataset::open(spec)?;
    let img = ds.get(0)?;
    println!("reopened {} images at {}x{}", ds.len(), img.height(), img.width());
    Ok(())
}
