//! Flow sidecar files and a synthetic translating-digit video generator.
//!
//! Sidecar layout: 8-byte magic `LMDFLOW1`, width and height as little-endian
//! `u32`, then `W·H` interleaved `(ox, oy)` little-endian `f32` pairs in
//! row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::FlowField;
use crate::raster::{sample_bilinear, Image};

pub const FLOW_MAGIC: &[u8; 8] = b"LMDFLOW1";
pub const FLOW_HEADER_LEN: usize = 16;

pub fn encode_flow(flow: &FlowField) -> Vec<u8> {
    let (h, w) = flow.dim();
    let mut out = Vec::with_capacity(FLOW_HEADER_LEN + 8 * h * w);
    out.extend_from_slice(FLOW_MAGIC);
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    for i in 0..h {
        for j in 0..w {
            out.extend_from_slice(&flow.ox[[i, j]].to_le_bytes());
            out.extend_from_slice(&flow.oy[[i, j]].to_le_bytes());
        }
    }
    out
}

pub fn decode_flow(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < FLOW_HEADER_LEN || &bytes[..8] != FLOW_MAGIC {
        return Err(Error::Dataset("not a flow sidecar (bad magic)".into()));
    }
    let w = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let h = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = &bytes[FLOW_HEADER_LEN..];
    if w == 0 || h == 0 || body.len() != 8 * w * h {
        return Err(Error::Dataset(format!("flow sidecar: {w}x{h} header but {} payload bytes", body.len())));
    }
    let f = |k: usize| f32::from_le_bytes(body[4 * k..4 * k + 4].try_into().expect("4 bytes"));
    let ox = Array2::from_shape_fn((h, w), |(i, j)| f(2 * (i * w + j)));
    let oy = Array2::from_shape_fn((h, w), |(i, j)| f(2 * (i * w + j) + 1));
    FlowField::new(ox, oy)
}

pub fn write_flow(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_flow(flow))?;
    Ok(())
}

pub fn read_flow(path: impl AsRef<Path>) -> Result<FlowField> {
    decode_flow(&fs::read(path)?)
}

/// One synthetic frame pair: `second(u, v) = first((u, v) + flow(u, v))`.
#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub first: Image,
    pub second: Image,
    pub flow: FlowField,
    /// Translation applied between the frames, in pixels.
    pub shift: [f64; 2],
}

/// Shifts `img` by `shift` pixels (content moves by `+shift`), clamping at the border.
pub fn translate(img: &Image, shift: [f64; 2]) -> Image {
    let (c, h, w) = img.data.dim();
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        let plane = img.data.index_axis(ndarray::Axis(0), ch);
        for i in 0..h {
            for j in 0..w {
                out[[ch, i, j]] =
                    sample_bilinear(plane, (j + 1) as f64 - shift[0], (i + 1) as f64 - shift[1]);
            }
        }
    }
    Image { data: out }
}

/// Builds a frame pair from `base` by translating it with a random velocity
/// of at most `max_step` pixels per axis. The flow field is exact.
pub fn synthetic_translation_pair<R: Rng + ?Sized>(base: &Image, max_step: f64, rng: &mut R) -> SyntheticPair {
    let shift = [rng.gen_range(-max_step..=max_step), rng.gen_range(-max_step..=max_step)];
    let second = translate(base, shift);
    let (h, w) = (base.height(), base.width());
    let flow = FlowField::uniform(h, w, -shift[0] as f32, -shift[1] as f32);
    SyntheticPair { first: base.clone(), second, flow, shift }
}
