mod common;

use codetr::autodiff::{Graph, Tensor};
use codetr::composite::{composite, CompositeSpec};
use codetr::harness::score::normalized_score;
use proptest::prelude::*;

fn specs() -> impl Strategy<Value = CompositeSpec> {
    prop_oneof![
        Just(CompositeSpec::Sum),
        Just(CompositeSpec::SumSquare),
        Just(CompositeSpec::SquareSum),
        (0.1f64..10.0).prop_map(|beta| CompositeSpec::Max { beta }),
    ]
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(xs in prop::collection::vec(-20.0f64..20.0, 1..12), c in -50.0f64..50.0) {
        let n = xs.len();
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1, n], xs.clone()).unwrap());
        let b = g.constant(Tensor::new(vec![1, n], xs.iter().map(|x| x + c).collect()).unwrap());
        let sa = g.softmax(a, 1).unwrap();
        let sb = g.softmax(b, 1).unwrap();
        for (p, q) in g.value(sa).data().iter().zip(g.value(sb).data()) {
            prop_assert!((p - q).abs() <= 1e-12, "{p} vs {q}");
        }
    }

    #[test]
    fn composite_is_permutation_invariant(
        spec in specs(),
        (r, perm) in prop::collection::vec(-3.0f64..3.0, 1..20)
            .prop_flat_map(|r| { let n = r.len(); (Just(r), Just((0..n).collect::<Vec<_>>()).prop_shuffle()) }),
    ) {
        let shuffled: Vec<f64> = perm.iter().map(|&i| r[i]).collect();
        let a = composite(&spec, &r).unwrap();
        let b = composite(&spec, &shuffled).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{spec}: {a} vs {b}");
        let brute = common::brute_composite(&spec, &r);
        prop_assert!((a - brute).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn sum_square_score_is_scale_invariant(
        r in prop::collection::vec(-1.0f64..1.0, 20),
        n in 1usize..=20,
        c in 0.01f64..100.0,
    ) {
        let spec = CompositeSpec::SumSquare;
        let observed = |xs: &[f64]| xs.chunks(n).map(|s| composite(&spec, s).unwrap()).sum::<f64>();
        let scaled: Vec<f64> = r.iter().map(|x| c * x).collect();
        let a = normalized_score(&spec, n, r.len(), 1.0, observed(&r)).unwrap();
        let b = normalized_score(&spec, n, r.len(), c, observed(&scaled)).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
    }
}
