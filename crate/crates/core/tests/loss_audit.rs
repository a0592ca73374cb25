use std::time::Instant;

use ucfed_core::audit::{audit_losses, check_network, random_exam, AUDIT_EXTENT, LOSS_NAMES};
use ucfed_core::rng::stream;

#[test]
fn every_loss_matches_finite_differences() {
    let t = Instant::now();
    let rows = audit_losses(17, 20, &[2, 4]).unwrap();
    for r in &rows {
        println!(
            "{:<18} K={} max_rel={:.2e} checked={} zero={} kinks={}",
            r.loss, r.classes, r.max_rel_error, r.checked, r.zero_gradient, r.kinks
        );
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert!(r.checked > r.zero_gradient + r.kinks, "{r:?}");
        assert!(r.kinks * 20 <= r.checked, "too many kinks: {r:?}");
    }
    assert_eq!(rows.len(), 2 * LOSS_NAMES.len());
    println!("audit took {:?}", t.elapsed());
}

/// The full network is piecewise linear below the heads, and its gradients
/// pass through many accumulations, so the end-to-end check samples
/// coordinates, skips kink-straddling steps and allows more rounding.
#[test]
fn network_gradients_match_finite_differences() {
    for k in [2usize, 4] {
        let mut worst = 0.0f64;
        let (mut checked, mut kinks) = (0, 0);
        for i in 0..6u64 {
            let mut rng = stream(5, &[k as u64, i]);
            let exam = random_exam(&mut rng, AUDIT_EXTENT, k);
            let r = check_network(&exam, &mut rng).unwrap();
            worst = worst.max(r.max_rel_error);
            checked += r.checked;
            kinks += r.kinks.len();
        }
        println!("network K={k} max_rel={worst:.2e} checked={checked} kinks={kinks}");
        assert!(worst < 1e-3, "K={k}: {worst}");
        assert!(kinks * 10 <= checked);
    }
}
