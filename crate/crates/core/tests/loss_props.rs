use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::Rng;
use ucfed_autograd::{Dense, Graph, Var};
use ucfed_core::audit::random_exam;
use ucfed_core::exam::Exam;
use ucfed_core::losses::{
    ggmap_loss, hist_high_loss, hist_strong_loss, multitask_loss, ExamTargets, LossBreakdown, LossConfig,
    MultiTaskWeights,
};
use ucfed_core::rng::stream;
use ucfed_core::supervision::{RegionSupervision, SupervisionMatrix};
use ucfed_core::ucnet::{region_histograms, BoundParams, ModelOutputs, REGION_BIAS, REGION_WEIGHT};

struct Heads {
    seg: Dense<f64>,
    gg: Dense<f64>,
    bias: Dense<f64>,
}

fn random_heads(seed: u64, extent: [usize; 3], k: usize) -> Heads {
    let mut rng = stream(seed, &[99]);
    let n: usize = extent.iter().product();
    let [x, y, z] = extent;
    let seg = Dense::from_vec(vec![1, x, y, z], (0..n).map(|_| rng.gen_range(0.01..0.99)).collect());
    let mut gg = vec![0.0; k * n];
    for v in 0..n {
        let w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = w.iter().sum();
        for c in 0..k {
            gg[c * n + v] = w[c] / s;
        }
    }
    let bias = Dense::from_vec(vec![k], (0..k).map(|_| rng.gen_range(-0.6..0.2)).collect());
    Heads {
        seg,
        gg: Dense::from_vec(vec![k, x, y, z], gg),
        bias,
    }
}

fn identity(k: usize) -> Dense<f64> {
    Dense::from_vec(vec![k, k], (0..k * k).map(|i| if i / k == i % k { 1.0 } else { 0.0 }).collect())
}

fn breakdown(targets: &ExamTargets, heads: &Heads, weights: &MultiTaskWeights) -> Option<LossBreakdown> {
    let k = targets.classes();
    let mut g = Graph::<f64>::new();
    let outputs = ModelOutputs {
        seg: g.constant(heads.seg.clone()),
        gg: g.constant(heads.gg.clone()),
    };
    let w = g.constant(identity(k));
    let b = g.constant(heads.bias.clone());
    let bp = BoundParams::from_vars(BTreeMap::from([(REGION_WEIGHT.to_string(), w), (REGION_BIAS.to_string(), b)]));
    multitask_loss(&mut g, &outputs, &bp, targets, weights, &LossConfig::default())
        .ok()
        .map(|(_, bd)| bd)
}

fn permuted(exam: &Exam, perm: &[usize]) -> ExamTargets {
    let n = exam.gland.len();
    let mut masks = Vec::with_capacity(exam.masks.len());
    let mut rows = Vec::new();
    for &r in perm {
        masks.extend_from_slice(&exam.masks.data()[r * n..(r + 1) * n]);
        rows.push(exam.supervision.get(r));
    }
    let masks = Dense::from_vec(exam.masks.shape().to_vec(), masks);
    ExamTargets::new(&masks, SupervisionMatrix::new(rows).unwrap(), exam.classes())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

const EXTENT: [usize; 3] = [4, 4, 3];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_term_is_nonnegative(seed in any::<u64>(), k in 2usize..=6) {
        let exam = random_exam(&mut stream(seed, &[]), EXTENT, k);
        let heads = random_heads(seed, EXTENT, k);
        let bd = breakdown(&exam.targets(), &heads, &MultiTaskWeights::default()).unwrap();
        for v in [bd.region_classifier, bd.hist_strong, bd.hist_high, bd.ggmap, bd.dice, bd.bce, bd.total] {
            prop_assert!(v >= 0.0 && v.is_finite(), "{bd:?}");
        }
    }

    #[test]
    fn region_order_does_not_matter(seed in any::<u64>(), k in 2usize..=4) {
        let exam = random_exam(&mut stream(seed, &[]), EXTENT, k);
        let heads = random_heads(seed, EXTENT, k);
        let mut perm: Vec<usize> = (0..exam.regions()).collect();
        perm.reverse();
        let shift = seed as usize % perm.len();
        perm.rotate_left(shift);
        let a = breakdown(&exam.targets(), &heads, &MultiTaskWeights::default()).unwrap();
        let b = breakdown(&permuted(&exam, &perm), &heads, &MultiTaskWeights::default()).unwrap();
        for (x, y) in [
            (a.region_classifier, b.region_classifier),
            (a.hist_strong, b.hist_strong),
            (a.hist_high, b.hist_high),
            (a.ggmap, b.ggmap),
            (a.dice, b.dice),
            (a.bce, b.bce),
            (a.total, b.total),
        ] {
            prop_assert!(close(x, y, 1e-12), "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn total_is_linear_in_each_lambda(seed in any::<u64>(), term in 0usize..4, scale in 0.1f64..4.0) {
        let exam = random_exam(&mut stream(seed, &[]), EXTENT, 2);
        let heads = random_heads(seed, EXTENT, 2);
        let base = MultiTaskWeights::default();
        let mut scaled = base;
        scaled.lambda[term] *= scale;
        let a = breakdown(&exam.targets(), &heads, &base).unwrap();
        let b = breakdown(&exam.targets(), &heads, &scaled).unwrap();
        prop_assert!(close(b.contribution(term), scale * a.contribution(term), 1e-12));
        let delta = b.total - a.total;
        prop_assert!(close(delta, b.contribution(term) - a.contribution(term), 1e-12));
    }

    #[test]
    fn histogram_rows_lie_on_the_simplex(seed in any::<u64>(), k in 2usize..=6) {
        let exam = random_exam(&mut stream(seed, &[]), EXTENT, k);
        let heads = random_heads(seed, EXTENT, k);
        let targets = exam.targets();
        let mut g = Graph::<f64>::new();
        let gg = g.constant(heads.gg.clone());
        let hist = region_histograms(&mut g, gg, &targets.voxels, &targets.supervision).unwrap();
        for row in hist.values(&g) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_voxel_region_ggmap_equals_hist_strong(seed in any::<u64>(), k in 2usize..=6, grade in 0i8..=5) {
        let heads = random_heads(seed, EXTENT, k);
        let n: usize = EXTENT.iter().product();
        let voxel = (seed % n as u64) as usize;
        let mut mask = vec![0u8; n];
        mask[voxel] = 1;
        let [x, y, z] = EXTENT;
        let masks = Dense::from_vec(vec![1, x, y, z], mask);
        let sup = SupervisionMatrix::new(vec![RegionSupervision::lesion(grade)]).unwrap();
        let targets = ExamTargets::new(&masks, sup, k);
        let cfg = LossConfig::default();
        let mut g = Graph::<f64>::new();
        let gg = g.constant(heads.gg.clone());
        let direct = ggmap_loss(&mut g, gg, &targets, &cfg).unwrap().var;
        let hist = region_histograms(&mut g, gg, &targets.voxels, &targets.supervision).unwrap();
        let pooled = hist_strong_loss(&mut g, &hist, &targets, &cfg).unwrap().var;
        let (a, b) = (g.value(direct).item(), g.value(pooled).item());
        prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }

    #[test]
    fn hist_high_vanishes_for_top_class(seed in any::<u64>(), k in 2usize..=6, rows in 1usize..4) {
        let heads = random_heads(seed, EXTENT, k);
        let n: usize = EXTENT.iter().product();
        let [x, y, z] = EXTENT;
        let mut rng = stream(seed, &[1]);
        let masks: Vec<u8> = (0..rows * n).map(|_| u8::from(rng.gen_bool(0.5))).collect();
        let masks = Dense::from_vec(vec![rows, x, y, z], masks);
        // Grade 5 maps to the top class for every K.
        let sup = SupervisionMatrix::new(vec![RegionSupervision::max_grade(5); rows]).unwrap();
        let targets = ExamTargets::new(&masks, sup, k);
        let mut g = Graph::<f64>::new();
        let gg = g.constant(heads.gg.clone());
        if let Ok(hist) = region_histograms(&mut g, gg, &targets.voxels, &targets.supervision) {
            let t = hist_high_loss(&mut g, &hist, &targets, &LossConfig::default()).unwrap();
            prop_assert_eq!(g.value(t.var).item(), 0.0);
        }
    }
}

#[test]
fn grad_of_constant_loss_is_zero() {
    // The histogram terms ignore the lesion map entirely.
    let exam = random_exam(&mut stream(3, &[]), EXTENT, 2);
    let heads = random_heads(3, EXTENT, 2);
    let targets = exam.targets();
    let mut g = Graph::<f64>::new();
    let seg: Var = g.param(heads.seg.clone());
    let gg = g.param(heads.gg.clone());
    let hist = region_histograms(&mut g, gg, &targets.voxels, &targets.supervision).unwrap();
    let t = hist_strong_loss(&mut g, &hist, &targets, &LossConfig::default()).unwrap();
    let grads = g.backward(t.var).unwrap();
    assert!(grads.wrt(&g, seg).data().iter().all(|&v| v == 0.0));
}
