use apl_core::metrics::{aggregate_id_acc, frechet_distance, spearman};
use proptest::prelude::*;

fn features(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    prop::collection::vec(prop::collection::vec(-2.0f32..2.0, d), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn frechet_is_symmetric_and_order_free(a in features(12, 4), b in features(12, 4), shift in 0usize..12) {
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= -1e-9);
        prop_assert!((ab - ba).abs() <= 1e-6 * (1.0 + ab));
        let mut rotated = a.clone();
        rotated.rotate_left(shift);
        let rot = frechet_distance(&rotated, &b).unwrap();
        prop_assert!((ab - rot).abs() <= 1e-6 * (1.0 + ab));
    }

    #[test]
    fn frechet_of_translated_copy_is_squared_shift(a in features(10, 3), dx in -3.0f32..3.0) {
        let moved: Vec<Vec<f32>> = a.iter().map(|v| vec![v[0] + dx, v[1], v[2]]).collect();
        let fd = frechet_distance(&a, &moved).unwrap();
        prop_assert!((fd - (dx as f64).powi(2)).abs() <= 1e-3 * (1.0 + fd), "{fd} vs {}", dx * dx);
    }

    #[test]
    fn spearman_ignores_monotone_transforms(x in prop::collection::vec(-10.0f64..10.0, 3..20)) {
        let y: Vec<f64> = x.iter().map(|v| v.powi(3) + 2.0 * v).collect();
        let flipped: Vec<f64> = x.iter().map(|v| (-v).exp()).collect();
        let distinct = { let mut s = x.clone(); s.sort_by(f64::total_cmp); s.windows(2).all(|w| w[0] < w[1]) };
        prop_assume!(distinct);
        prop_assert!((spearman(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((spearman(&x, &flipped).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_bounds(groups in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 1..6), 1..8)) {
        let (mean, max) = aggregate_id_acc(&groups).unwrap();
        prop_assert!(mean <= max + 1e-12);
        let lo = groups.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
        let hi = groups.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo - 1e-12 <= mean && max <= hi + 1e-12);
    }
}
