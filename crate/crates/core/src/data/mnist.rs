//! Bundled 5 000-image MNIST subset (500 per digit).

use std::io::Read;

use flate2::read::GzDecoder;
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::raster::Image;

static ASSET: &[u8] = include_bytes!("../../assets/mnist5k.bin.gz");
const MAGIC: u32 = 0x4c4d_4e31;

pub const MNIST_SIDE: usize = 28;

/// A labelled 28×28 digit with values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Digit {
    pub label: u8,
    pub image: Image,
}

/// Decodes the bundled subset, optionally keeping one digit class.
pub fn load_bundled(digit: Option<u8>) -> Result<Vec<Digit>> {
    let mut raw = Vec::new();
    GzDecoder::new(ASSET).read_to_end(&mut raw)?;
    let word = |i: usize| u32::from_be_bytes([raw[4 * i], raw[4 * i + 1], raw[4 * i + 2], raw[4 * i + 3]]);
    if raw.len() < 16 || word(0) != MAGIC {
        return Err(Error::Dataset("bundled MNIST asset is corrupt".into()));
    }
    let (n, h, w) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let labels = &raw[16..16 + n];
    let pixels = &raw[16 + n..];
    if pixels.len() != n * h * w {
        return Err(Error::Dataset("bundled MNIST asset is truncated".into()));
    }
    Ok((0..n)
        .filter(|&i| digit.map_or(true, |d| labels[i] == d))
        .map(|i| {
            let px = &pixels[i * h * w..(i + 1) * h * w];
            let data = Array3::from_shape_fn((1, h, w), |(_, r, c)| px[r * w + c] as f32 / 255.0);
            Digit { label: labels[i], image: Image { data } }
        })
        .collect())
}
