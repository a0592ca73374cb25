use std::sync::Arc;

use proptest::prelude::*;
use ucfed_autograd::Dense;
use ucfed_core::fed::train::exam_loss;
use ucfed_core::fed::TrainConfig;
use ucfed_core::rng::stream;
use ucfed_core::supervision::{SIGNAL_LESION, SIGNAL_MAX_GRADE};
use ucfed_core::synth::dataset::verify_manifest;
use ucfed_core::synth::normalize::zscore_normalize;
use ucfed_core::synth::sextant::sextant_masks;
use ucfed_core::synth::{synth_dataset, synth_exam, synth_exam_with_grade, DataLoader, SiteProfile, SplitCounts};
use ucfed_core::ucnet::{ModelParams, UCNetConfig};

fn mask_row(masks: &Dense<u8>, r: usize) -> &[u8] {
    let n: usize = masks.shape()[1..].iter().product();
    &masks.data()[r * n..(r + 1) * n]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generated_exams_respect_geometry(seed in any::<u64>(), lesion_site in any::<bool>()) {
        let profile = if lesion_site { SiteProfile::ucsf_like() } else { SiteProfile::ucla_like() };
        let exam = synth_exam(&profile, &mut stream(seed, &[]));
        prop_assert!(exam.validate().is_ok());
        let gland = exam.gland.data();
        let rows = exam.supervision.rows();
        for (r, row) in rows.iter().enumerate() {
            let m = mask_row(&exam.masks, r);
            if row.signal >= SIGNAL_LESION {
                prop_assert!(m.iter().any(|&v| v != 0), "row {r} empty");
            }
            prop_assert!(m.iter().zip(gland).all(|(&v, &g)| v == 0 || g != 0), "row {r} leaves the gland");
            let one_hot = exam.grades.row(r);
            let hot = one_hot.iter().filter(|&&v| v == 1.0).count();
            prop_assert_eq!(hot, usize::from(row.grade_known()));
        }
        let sextants: Vec<usize> = (0..rows.len()).filter(|&r| rows[r].signal == SIGNAL_MAX_GRADE).collect();
        if lesion_site {
            prop_assert_eq!(sextants.len(), 6);
            for v in 0..gland.len() {
                let covering = sextants.iter().filter(|&&r| mask_row(&exam.masks, r)[v] != 0).count();
                prop_assert_eq!(covering, usize::from(gland[v] != 0));
            }
        } else {
            prop_assert_eq!(sextants.len(), 1);
            prop_assert_eq!(mask_row(&exam.masks, sextants[0]), gland);
        }
    }

    #[test]
    fn sextants_partition_any_box_gland(
        x0 in 0usize..4, x1 in 5usize..10, y0 in 0usize..3, y1 in 3usize..6, z0 in 0usize..2, z1 in 4usize..7,
        holes in proptest::collection::vec(0usize..10 * 6 * 7, 0..20),
    ) {
        let extent = [10, 6, 7];
        let mut gland = vec![0u8; 10 * 6 * 7];
        for x in x0..x1 {
            for y in y0..y1 {
                for z in z0..z1 {
                    gland[(x * 6 + y) * 7 + z] = 1;
                }
            }
        }
        for h in holes {
            gland[h] = 0;
        }
        prop_assume!(gland.iter().any(|&v| v != 0));
        if let Ok(masks) = sextant_masks(&gland, extent) {
            for v in 0..gland.len() {
                let covering = masks.iter().filter(|m| m[v] != 0).count();
                prop_assert_eq!(covering, usize::from(gland[v] != 0));
            }
        }
    }

    #[test]
    fn zscore_is_idempotent_on_generated_channels(seed in any::<u64>()) {
        let exam = synth_exam(&SiteProfile::ucla_like(), &mut stream(seed, &[]));
        let n = exam.gland.len();
        let gland = exam.gland.data();
        for c in 0..3 {
            let channel = &exam.image.data()[c * n..(c + 1) * n];
            let again = zscore_normalize(channel, gland).unwrap();
            for v in (0..n).filter(|&v| gland[v] != 0) {
                prop_assert!((again[v] - channel[v]).abs() < 1e-5, "channel {c}");
            }
        }
    }
}

#[test]
fn exam_level_site_breakdown() {
    let mut profile = SiteProfile::ucla_like();
    profile.classes = 4;
    // Class 2 of 4 leaves one bin above it, so hist_high has something to score.
    let exam = synth_exam_with_grade(&profile, 2, &mut stream(7, &[]));
    let model = ModelParams::<f64>::build(UCNetConfig {
        base_channels: 2,
        classes: 4,
        ..UCNetConfig::default()
    })
    .unwrap();
    let bd = exam_loss(&model, &exam, &TrainConfig::default()).unwrap();
    // Grades are known only for the gland-wide row.
    assert_eq!(bd.alpha, [true, true, false, true]);
    assert_eq!(bd.ggmap, 0.0);
    assert_eq!(bd.hist_strong, 0.0);
    assert!(bd.hist_high > 0.0 && bd.dice > 0.0 && bd.bce > 0.0);
}

#[test]
fn flip_is_equivariant_at_zero_heads() {
    let mut profile = SiteProfile::ucsf_like();
    profile.extent = [8, 8, 4];
    let exam = synth_exam_with_grade(&profile, 4, &mut stream(8, &[]));
    let mut model = ModelParams::<f64>::build(UCNetConfig {
        base_channels: 2,
        ..UCNetConfig::default()
    })
    .unwrap();
    model.zero_heads();
    let a = exam_loss(&model, &exam, &TrainConfig::default()).unwrap();
    let b = exam_loss(&model, &exam.flip_x(), &TrainConfig::default()).unwrap();
    assert!((a.total - b.total).abs() < 1e-12, "{a:?} vs {b:?}");
    assert_eq!(exam.flip_x().flip_x(), exam);
}

#[test]
fn dataset_is_reproducible_and_hash_verified() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let counts = SplitCounts { train: 4, val: 2, test: 2 };
    let ma = synth_dataset(&SiteProfile::ucla_like(), counts, 21, a.path()).unwrap();
    let mb = synth_dataset(&SiteProfile::ucla_like(), counts, 21, b.path()).unwrap();
    assert_eq!(ma, mb);
    for (rel, _) in &ma {
        assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
    }
    assert_eq!(verify_manifest(b.path()).unwrap(), ma.len());
    let other = tempfile::tempdir().unwrap();
    let mc = synth_dataset(&SiteProfile::ucla_like(), counts, 22, other.path()).unwrap();
    assert_ne!(ma, mc);
}

#[test]
fn loader_batches_and_determinism() {
    let profile = SiteProfile::ucsf_like();
    let exams: Vec<_> = (0..5).map(|i| synth_exam(&profile, &mut stream(9, &[i]))).collect();
    let exams = Arc::new(exams);
    let a = DataLoader::new(exams.clone(), 2, false, 3);
    let sizes: Vec<usize> = a.epoch(0).map(|b| b.len()).collect();
    assert_eq!(sizes, vec![2, 2, 1]);
    let b = DataLoader::new(exams, 2, false, 3);
    let ids = |l: &DataLoader| -> Vec<String> { l.epoch(1).flatten().map(|e| e.meta.exam_id.clone()).collect() };
    assert_eq!(ids(&a), ids(&b));
}
