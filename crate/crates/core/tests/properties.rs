use fairdiff::guidance::quota_assignment;
use fairdiff::hspace::{ChiSquare, DistributionLoss};
use fairdiff::metrics::fd_between;
use fairdiff::numkit::RngStream;
use proptest::prelude::*;

fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #[test]
    fn quotas_sum_to_n_and_round_to_targets(n in 1usize..300, probs in simplex(4), seed in any::<u64>()) {
        let q = quota_assignment(n, &probs, &mut RngStream::new(seed));
        prop_assert_eq!(q.len(), n);
        for (c, p) in probs.iter().enumerate() {
            let count = q.iter().filter(|&&x| x as usize == c).count() as f64;
            prop_assert!((count - p * n as f64).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn quotas_are_a_permutation_across_seeds(n in 1usize..100, probs in simplex(2), a in any::<u64>(), b in any::<u64>()) {
        let mut x = quota_assignment(n, &probs, &mut RngStream::new(a));
        let mut y = quota_assignment(n, &probs, &mut RngStream::new(b));
        x.sort();
        y.sort();
        prop_assert_eq!(x, y);
    }

    #[test]
    fn fd_is_a_metric(a in simplex(4), b in simplex(4), c in simplex(4)) {
        prop_assert_eq!(fd_between(&a, &a), 0.0);
        prop_assert_eq!(fd_between(&a, &b), fd_between(&b, &a));
        prop_assert!(fd_between(&a, &c) <= fd_between(&a, &b) + fd_between(&b, &c) + 1e-12);
        // two points on the simplex are at most √2 apart
        prop_assert!(fd_between(&a, &b) <= 2f64.sqrt() + 1e-12);
    }

    #[test]
    fn chi_square_is_nonnegative_and_zero_at_target(p in simplex(3), r in simplex(3)) {
        let loss = ChiSquare::default();
        prop_assert!(loss.value(&p, &r) >= 0.0);
        prop_assert!(loss.value(&r, &r).abs() < 1e-15);
        prop_assert!(loss.grad(&r, &r).iter().all(|g| g.abs() < 1e-12));
    }
}
