//! Detection maps to landmarks and back: softmax, soft-argmax, spatial
//! variance, then Gaussian rendering for the decoder.
//!
//!     cargo run --example heatmaps

use lmdis::geometry::{
    channel_softmax, render_gaussian_maps, soft_argmax, spatial_variance, ConfidenceMap, Frame, MapKind, RenderMode,
    Width,
};
use ndarray::Array4;

fn main() -> lmdis::Result<()> {
    let (h, w) = (12, 16);
    // two peaked score channels plus a flat background channel
    let peaks = [(5.0, 4.0), (11.0, 8.0)];
    let raw = Array4::from_shape_fn((1, 3, h, w), |(_, k, i, j)| match peaks.get(k) {
        Some(&(px, py)) => 6.0 - 0.5 * (((j + 1) as f64 - px).powi(2) + ((i + 1) as f64 - py).powi(2)),
        None => 0.0,
    });
    let probs = channel_softmax(&ConfidenceMap::new(raw, MapKind::RawScores))?;
    let fg = probs.foreground(2).to_owned();
    let (coords, zeta) = soft_argmax(fg.view())?;
    let var = spatial_variance(fg.view(), coords.view(), zeta.view())?;
    for k in 0..2 {
        println!(
            "landmark {k}: ({:.3}, {:.3}) px, mass {:.3}, variance ({:.3}, {:.3}), planted at {:?}",
            coords[[0, k, 0]],
            coords[[0, k, 1]],
            zeta[[0, k]],
            var[[0, k, 0]],
            var[[0, k, 1]],
            peaks[k]
        );
    }
    let rendered = render_gaussian_maps(coords.view(), Width::Std(1.5), (h, w), RenderMode::Decoder, Frame::Pixel)?;
    let sums: Vec<String> = (0..3).map(|k| format!("{:.2}", rendered.data.slice(ndarray::s![0, k, .., ..]).sum())).collect();
    println!("decoder map masses (two landmarks + background): {}", sums.join(", "));
    Ok(())
}
