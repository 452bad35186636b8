//! Regression, flip handling and NME on planted data.

use lmdis::evaluation::{fit_regressor, flip_aware_fit, flip_row, nme, Normalizer};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Worst coefficient error recovering `Y = X W` from noiseless data.
pub fn planted_map_error(instances: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let r = &mut ChaCha8Rng::seed_from_u64(100 + i as u64);
        let (k, l) = (r.gen_range(2..8), r.gen_range(2..6));
        let n = 4 * k + r.gen_range(0..20);
        let x = Array2::from_shape_simple_fn((n, 2 * k), || r.gen_range(0.0..1.0));
        let w = Array2::from_shape_simple_fn((2 * k, 2 * l), || r.sample::<f64, _>(StandardNormal));
        let fit = fit_regressor(x.view(), x.dot(&w).view()).unwrap();
        let err = (&fit.model.weights - &w).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        worst = worst.max(err);
    }
    worst
}

pub struct FlipCase {
    pub discovered: Array2<f64>,
    pub annotated: Array2<f64>,
    pub pairs: Vec<[usize; 2]>,
    pub planted: Vec<bool>,
}

/// Annotations generated by a linear map from the discovered landmarks, with
/// the left/right labels swapped on a random subset of images. The map keeps
/// every left landmark to the right of its counterpart, so exactly the
/// unswapped rows look frontal.
pub fn mirrored_case(seed: u64) -> FlipCase {
    let r = &mut ChaCha8Rng::seed_from_u64(seed);
    let (n, k) = (60, 6);
    // five annotated points: two mirrored pairs plus one on the axis
    let pairs = vec![[0, 1], [2, 3]];
    let discovered = Array2::from_shape_simple_fn((n, 2 * k), || r.gen_range(0.2..0.8));
    let mut w = Array2::from_shape_simple_fn((2 * k, 10), || r.sample::<f64, _>(StandardNormal) * 0.3);
    for (col, plus, minus) in [(0, 0, 1), (4, 4, 5)] {
        // left x = d_a + d_b, right x = d_a - d_b
        w.column_mut(col).fill(0.0);
        w.column_mut(col + 2).fill(0.0);
        w[[plus, col]] = 1.0;
        w[[minus, col]] = 1.0;
        w[[plus, col + 2]] = 1.0;
        w[[minus, col + 2]] = -1.0;
    }
    let truth = discovered.dot(&w);
    let planted: Vec<bool> = (0..n).map(|i| i >= 10 && r.gen_bool(0.35)).collect();
    let mut annotated = truth;
    for (i, mut row) in annotated.axis_iter_mut(Axis(0)).enumerate() {
        if planted[i] {
            flip_row(row.as_slice_mut().unwrap(), &pairs);
        }
    }
    FlipCase { discovered, annotated, pairs, planted }
}

/// Whether the flip-aware fit recovers the planted flags exactly, per seed.
pub fn flip_recovery(seeds: usize) -> Vec<bool> {
    (0..seeds)
        .map(|s| {
            let c = mirrored_case(500 + s as u64);
            let ff = flip_aware_fit(c.discovered.view(), c.annotated.view(), &c.pairs).unwrap();
            ff.converged && ff.flipped == c.planted
        })
        .collect()
}

/// `(nme(gt, gt), nme(gt + unit-biocular offsets, gt))` on random faces.
pub fn nme_anchors(seed: u64) -> (f64, f64) {
    let r = &mut ChaCha8Rng::seed_from_u64(seed);
    let (n, l) = (25, 5);
    let gt: Array2<f64> = Array2::from_shape_simple_fn((n, 2 * l), || r.gen_range(0.0..1.0));
    let mut off = gt.clone();
    for i in 0..n {
        let d = (gt[[i, 0]] - gt[[i, 2]]).hypot(gt[[i, 1]] - gt[[i, 3]]);
        for k in 0..l {
            let a: f64 = r.gen_range(0.0..std::f64::consts::TAU);
            off[[i, 2 * k]] += d * a.cos();
            off[[i, 2 * k + 1]] += d * a.sin();
        }
    }
    let biocular = Normalizer::Pair(0, 1);
    let zero = nme(gt.view(), gt.view(), biocular).unwrap().percent;
    let hundred = nme(off.view(), gt.view(), biocular).unwrap().percent;
    (zero, hundred)
}
