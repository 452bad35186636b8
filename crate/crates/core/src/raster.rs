use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{s, Array3, ArrayView3};

use crate::error::{shape_err, Result};

/// `(channels, rows, cols)` raster with values in `[0, 1]`; 1 or 3 channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub data: Array3<f32>,
}

impl Image {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let c = data.dim().0;
        if c != 1 && c != 3 {
            return Err(shape_err(format!("image must have 1 or 3 channels, got {c}")));
        }
        Ok(Self { data })
    }

    pub fn filled(channels: usize, h: usize, w: usize, value: f32) -> Self {
        Self { data: Array3::from_elem((channels, h, w), value) }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn view(&self) -> ArrayView3<'_, f32> {
        self.data.view()
    }

    pub fn from_dynamic(img: &DynamicImage, channels: usize) -> Result<Self> {
        match channels {
            1 => {
                let g = img.to_luma8();
                let (w, h) = g.dimensions();
                let data = Array3::from_shape_fn((1, h as usize, w as usize), |(_, i, j)| {
                    g.get_pixel(j as u32, i as u32)[0] as f32 / 255.0
                });
                Ok(Self { data })
            }
            3 => {
                let g = img.to_rgb8();
                let (w, h) = g.dimensions();
                let data = Array3::from_shape_fn((3, h as usize, w as usize), |(c, i, j)| {
                    g.get_pixel(j as u32, i as u32)[c] as f32 / 255.0
                });
                Ok(Self { data })
            }
            c => Err(shape_err(format!("unsupported channel count {c}"))),
        }
    }

    /// 8-bit quantization with round-to-nearest after clamping to `[0, 1]`.
    pub fn to_dynamic(&self) -> DynamicImage {
        let (c, h, w) = self.data.dim();
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        if c == 1 {
            let buf: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                Luma([q(self.data[[0, y as usize, x as usize]])])
            });
            DynamicImage::ImageLuma8(buf)
        } else {
            let buf: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                let px = |ch: usize| q(self.data[[ch, y as usize, x as usize]]);
                Rgb([px(0), px(1), px(2)])
            });
            DynamicImage::ImageRgb8(buf)
        }
    }

    pub fn load(path: impl AsRef<Path>, channels: usize) -> Result<Self> {
        let img = image::open(path)?;
        Self::from_dynamic(&img, channels)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_dynamic().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_dynamic().write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn decode_png(bytes: &[u8], channels: usize) -> Result<Self> {
        let img = image::load_from_memory(bytes)?;
        Self::from_dynamic(&img, channels)
    }

    /// Bilinear sample at 1-based pixel coordinates `(x, y)` with edge clamping.
    pub fn sample_bilinear(&self, channel: usize, x: f64, y: f64) -> f32 {
        sample_bilinear(self.data.slice(s![channel, .., ..]), x, y)
    }

    pub fn mean(&self) -> f32 {
        self.data.mean().unwrap_or(0.0)
    }
}

/// Distinct overlay colors, cycled by landmark index.
pub const PALETTE: [[f32; 3]; 10] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.70, 0.10],
    [0.15, 0.35, 0.95],
    [0.95, 0.75, 0.05],
    [0.80, 0.10, 0.80],
    [0.05, 0.80, 0.80],
    [0.95, 0.50, 0.10],
    [0.50, 0.30, 0.10],
    [0.55, 0.55, 0.55],
    [0.00, 0.00, 0.00],
];

/// RGB copy of `img` with a filled square of side `2r+1` at each 1-based point.
pub fn draw_landmarks(img: &Image, points: &[[f64; 2]], r: usize) -> Image {
    let (c, h, w) = img.data.dim();
    let mut out = Array3::from_shape_fn((3, h, w), |(ch, i, j)| img.data[[ch.min(c - 1), i, j]]);
    for (k, p) in points.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let (cx, cy) = (p[0].round() as i64 - 1, p[1].round() as i64 - 1);
        let r = r as i64;
        for i in (cy - r)..=(cy + r) {
            for j in (cx - r)..=(cx + r) {
                if i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w {
                    for (ch, v) in color.iter().enumerate() {
                        out[[ch, i as usize, j as usize]] = *v;
                    }
                }
            }
        }
    }
    Image { data: out }
}

/// Bilinear sample of a `(rows, cols)` plane at 1-based `(x, y)`, clamping to
/// the border. Coordinates within 1e-9 of an integer snap to it so identity
/// resampling is exact.
pub fn sample_bilinear(plane: ndarray::ArrayView2<f32>, x: f64, y: f64) -> f32 {
    let (h, w) = plane.dim();
    let snap = |v: f64| {
        let r = v.round();
        if (v - r).abs() < 1e-9 {
            r
        } else {
            v
        }
    };
    let cx = (snap(x) - 1.0).clamp(0.0, (w - 1) as f64);
    let cy = (snap(y) - 1.0).clamp(0.0, (h - 1) as f64);
    let j0 = cx.floor() as usize;
    let i0 = cy.floor() as usize;
    let j1 = (j0 + 1).min(w - 1);
    let i1 = (i0 + 1).min(h - 1);
    let fx = (cx - j0 as f64) as f32;
    let fy = (cy - i0 as f64) as f32;
    if fx == 0.0 && fy == 0.0 {
        return plane[[i0, j0]];
    }
    let top = plane[[i0, j0]] * (1.0 - fx) + plane[[i0, j1]] * fx;
    let bot = plane[[i1, j0]] * (1.0 - fx) + plane[[i1, j1]] * fx;
    top * (1.0 - fy) + bot * fy
}
