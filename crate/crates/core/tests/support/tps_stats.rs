//! TPS interpolation exactness and sampler statistics.

use lmdis::tps::{sample_random_tps, sample_tps_with_mode, solve_tps, ControlMode, Domain, TpsSampleConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INTERP_TOLERANCE: f64 = 1e-6;
pub const MODE_DRAWS: usize = 10_000;

/// Worst control-point residual over unregularized solves with 9 to 25
/// random pairs.
pub fn interpolation_residual(instances: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let r = &mut ChaCha8Rng::seed_from_u64(0x7e5 + i as u64);
        let p = 9 + i % 17;
        let src: Vec<[f64; 2]> = (0..p).map(|_| [r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)]).collect();
        let dst: Vec<[f64; 2]> = src.iter().map(|q| [q[0] + r.gen_range(-0.2..0.2), q[1] + r.gen_range(-0.2..0.2)]).collect();
        let t = solve_tps(&src, &dst, 0.0).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            let g = t.apply_point(*s);
            worst = worst.max((g[0] - d[0]).abs()).max((g[1] - d[1]).abs());
        }
    }
    worst
}

/// Largest sampled translation as a fraction of the image extent, with every
/// other random component switched off.
pub fn max_translation_fraction(draws: usize) -> f64 {
    let cfg = TpsSampleConfig { translate_range: TpsSampleConfig::default().translate_range, ..TpsSampleConfig::zeroed() };
    let domain = Domain::new(48, 64);
    let ext = domain.extent();
    let c = domain.center();
    let r = &mut ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let (t, _) = sample_tps_with_mode(&cfg, ControlMode::Grid, None, &domain, r).unwrap();
        let g = t.apply_point(c);
        worst = worst.max(((g[0] - c[0]) / ext[0]).abs()).max(((g[1] - c[1]) / ext[1]).abs());
    }
    worst
}

/// Share of draws that used landmark control points.
pub fn landmark_mode_frequency(draws: usize) -> f64 {
    let cfg = TpsSampleConfig::default();
    let domain = Domain::new(32, 32);
    let r = &mut ChaCha8Rng::seed_from_u64(5);
    let landmarks: Vec<[f64; 2]> = (0..10).map(|_| [r.gen_range(0.15..0.85), r.gen_range(0.15..0.85)]).collect();
    let hits = (0..draws)
        .filter(|_| sample_random_tps(&cfg, Some(&landmarks), &domain, r).unwrap().1 == ControlMode::Landmarks)
        .count();
    hits as f64 / draws as f64
}
