use proptest::prelude::*;
use ucfed_autograd::{Dense, Graph};

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(k in 2usize..7, logits in proptest::collection::vec(-300.0f64..300.0, 6 * 8)) {
        let n = 8;
        let mut g = Graph::<f64>::new();
        let x = g.constant(Dense::from_vec(vec![k, 2, 2, 2], logits[..k * n].to_vec()));
        let y = g.softmax_channels(x).unwrap();
        let d = g.value(y).data();
        for v in 0..n {
            let s: f64 = (0..k).map(|c| d[c * n + v]).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!((0..k).all(|c| d[c * n + v] >= 0.0));
        }
    }

    #[test]
    fn softmax_shift_invariant(logits in proptest::collection::vec(-5.0f64..5.0, 3 * 4), c in -50.0f64..50.0) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Dense::from_vec(vec![3, 1, 2, 2], logits.clone()));
        let xs = g.constant(Dense::from_vec(vec![3, 1, 2, 2], logits.iter().map(|v| v + c).collect()));
        let a = g.softmax_channels(x).unwrap();
        let b = g.softmax_channels(xs).unwrap();
        for (p, q) in g.value(a).data().iter().zip(g.value(b).data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn float32_softmax_sums_to_one(logits in proptest::collection::vec(-30.0f32..30.0, 4 * 8)) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Dense::from_vec(vec![4, 2, 2, 2], logits));
        let y = g.softmax_channels(x).unwrap();
        let d = g.value(y).data();
        for v in 0..8 {
            let s: f32 = (0..4).map(|c| d[c * 8 + v]).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn backward_is_bitwise_deterministic() {
    let build = || {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Dense::from_vec(vec![2, 4, 4, 2], (0..64).map(|i| (i as f64 * 0.37).sin()).collect()));
        let k = g.param(Dense::from_vec(vec![3, 2, 3, 3, 3], (0..162).map(|i| (i as f64 * 0.11).cos() * 0.2).collect()));
        let y = g.conv3d(x, k, 1, 1).unwrap();
        let s = g.softmax_channels(y).unwrap();
        let l = g.log(s);
        let m = g.mean(l);
        let grads = g.backward(m).unwrap();
        grads.get(k).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(build(), build());
}
