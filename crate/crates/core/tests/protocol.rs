mod support;

use support::protocol::*;

#[test]
fn regressor_recovers_planted_map() {
    let err = planted_map_error(20);
    assert!(err <= 1e-6, "{err:.3e}");
}

#[test]
fn flip_aware_fit_recovers_planted_flags() {
    let ok = flip_recovery(10);
    assert!(ok.iter().all(|&b| b), "{ok:?}");
}

#[test]
fn nme_anchor_values() {
    for seed in 0..5 {
        let (zero, hundred) = nme_anchors(seed);
        assert!(zero.abs() <= 1e-9, "{zero}");
        assert!((hundred - 100.0).abs() <= 1e-9, "{hundred}");
    }
}
