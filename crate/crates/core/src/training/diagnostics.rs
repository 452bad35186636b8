use ndarray::{Array3, ArrayView3};
use rand::Rng;

use crate::error::Result;
use crate::geometry::edge_length;
use crate::losses::{map_to_image_offset, CoordWarp, Shifted};
use crate::model::{stack_images, Model};
use crate::nn::Mode;
use crate::raster::Image;
use crate::tps::{sample_tps_with_mode, warp_image, ControlMode, Domain, TpsSampleConfig};

/// Mean over the batch of the mean distance between landmark pairs, in the
/// units of `landmarks`.
pub fn mean_pairwise_distance(landmarks: ArrayView3<f32>) -> f64 {
    let (b, k, _) = landmarks.dim();
    if k < 2 || b == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for bi in 0..b {
        let mut s = 0.0;
        for i in 0..k {
            for j in (i + 1)..k {
                let dx = (landmarks[[bi, i, 0]] - landmarks[[bi, j, 0]]) as f64;
                let dy = (landmarks[[bi, i, 1]] - landmarks[[bi, j, 1]]) as f64;
                s += dx.hypot(dy);
            }
        }
        total += s / (k * (k - 1) / 2) as f64;
    }
    total / b as f64
}

fn encode_landmarks(model: &Model<f32>, images: &[Image], chunk: usize) -> Result<Array3<f32>> {
    let mut parts = Vec::new();
    for c in images.chunks(chunk.max(1)) {
        let x = stack_images::<f32>(c)?;
        parts.push(model.encode(x.view(), Mode::Eval)?.0.landmarks);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(ndarray::Axis(0), &views).expect("same K"))
}

/// Landmark spread on `images` in map pixels (eval-mode BN).
pub fn landmark_spread_px(model: &Model<f32>, images: &[Image]) -> Result<f64> {
    let lm = encode_landmarks(model, images, 16)?;
    Ok(mean_pairwise_distance(lm.view()) * edge_length(model.map_size()))
}

/// Mean `‖g(ℓ') − ℓ‖` in map pixels under fresh grid-controlled random TPS
/// warps, one per image.
pub fn equivariance_error_px<R: Rng + ?Sized>(
    model: &Model<f32>,
    images: &[Image],
    tps: &TpsSampleConfig,
    rng: &mut R,
) -> Result<f64> {
    let (h, w) = model.config.image_hw();
    let domain = Domain::new(h, w);
    let grid = model.map_size();
    let offset = map_to_image_offset(grid, (h, w));
    let mut warps = Vec::with_capacity(images.len());
    let mut warped = Vec::with_capacity(images.len());
    for img in images {
        let (t, _) = sample_tps_with_mode(tps, ControlMode::Grid, None, &domain, rng)?;
        warped.push(warp_image(img, &t));
        warps.push(t);
    }
    let lm = encode_landmarks(model, images, 16)?;
    let lw = encode_landmarks(model, &warped, 16)?;
    let e = edge_length(grid);
    let (b, k, _) = lm.dim();
    let mut total = 0.0;
    for bi in 0..b {
        let g = Shifted { inner: &warps[bi], offset };
        for ki in 0..k {
            let q = g.apply([lw[[bi, ki, 0]] as f64, lw[[bi, ki, 1]] as f64]);
            total += (q[0] - lm[[bi, ki, 0]] as f64).hypot(q[1] - lm[[bi, ki, 1]] as f64);
        }
    }
    Ok(total / (b * k).max(1) as f64 * e)
}
