//! The landmark-regression protocol on planted data: a linear map from
//! discovered to annotated landmarks, flip-aware fitting and NME.
//!
//!     cargo run --example evaluate

use lmdis::evaluation::{fit_regressor, flip_aware_fit, flip_row, nme, Normalizer};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> lmdis::Result<()> {
    let r = &mut ChaCha8Rng::seed_from_u64(1);
    let (n, k) = (200, 6);
    let discovered = Array2::from_shape_simple_fn((n, 2 * k), || r.gen_range(0.2..0.8));
    let mut map = Array2::from_shape_simple_fn((2 * k, 10), || r.sample::<f64, _>(StandardNormal) * 0.3);
    // mirrored pairs: left x = d_a + d_b and right x = d_a - d_b, so a frontal
    // face always has its left point to the right of its right point
    for (col, a, b) in [(0, 0, 1), (4, 4, 5)] {
        map.column_mut(col).fill(0.0);
        map.column_mut(col + 2).fill(0.0);
        map[[a, col]] = 1.0;
        map[[b, col]] = 1.0;
        map[[a, col + 2]] = 1.0;
        map[[b, col + 2]] = -1.0;
    }
    let annotated = discovered.dot(&map);

    let (train, test) = (discovered.slice(ndarray::s![..150, ..]), discovered.slice(ndarray::s![150.., ..]));
    let fit = fit_regressor(train, annotated.slice(ndarray::s![..150, ..]))?;
    let pred = fit.model.predict(test);
    let report = nme(pred.view(), annotated.slice(ndarray::s![150.., ..]), Normalizer::Pair(0, 1))?;
    println!("plain fit: rank {}, train rms {:.2e}, test NME {:.3}%", fit.rank, fit.residual_rms, report.percent);

    // swap left/right labels on a third of the images
    let pairs = [[0, 1], [2, 3]];
    let mut swapped = annotated.clone();
    let mut planted = 0;
    for (i, mut row) in swapped.axis_iter_mut(Axis(0)).enumerate() {
        if i % 3 == 1 {
            flip_row(row.as_slice_mut().expect("contiguous"), &pairs);
            planted += 1;
        }
    }
    let ff = flip_aware_fit(discovered.view(), swapped.view(), &pairs)?;
    let found = ff.flipped.iter().filter(|&&f| f).count();
    let exact = ff.flipped.iter().enumerate().all(|(i, &f)| f == (i % 3 == 1));
    println!("flip-aware fit: {found} rows flagged, {planted} planted, exact match {exact}, converged {}", ff.converged);
    Ok(())
}
