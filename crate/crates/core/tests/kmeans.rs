#[path = "support/ari.rs"]
mod ari;

use ari::{ari, blobs};
use mid_core::analysis::{kmeans_fit, KMeansConfig};
use proptest::prelude::*;

#[test]
fn ari_oracle_sanity() {
    assert_eq!(ari(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
    assert!(ari(&[0, 0, 1, 1], &[0, 1, 0, 1]) < 0.0);
}

#[test]
fn separated_blobs_recovered_exactly() {
    for k in [2, 3, 5] {
        let (x, truth) = blobs(k, 60, 4, 10.0, k as u64);
        let cfg = KMeansConfig::new(k);
        let fit = kmeans_fit(&x, &cfg).unwrap();
        assert_eq!(ari(&fit.assignments, &truth), 1.0, "k = {k}");
        assert_eq!(kmeans_fit(&x, &cfg).unwrap(), fit);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn lloyd_fixed_point(seed in 0u64..1000, k in 1usize..5, n in 6usize..40) {
        let (x, _) = blobs(3, n, 3, 2.0, seed);
        let fit = kmeans_fit(&x, &KMeansConfig::new(k)).unwrap();
        // every point sits with its nearest centroid
        for (p, &a) in x.iter().zip(&fit.assignments) {
            let d = |c: &Vec<f64>| c.iter().zip(p).map(|(u, &v)| (u - v as f64).powi(2)).sum::<f64>();
            let own = d(&fit.centroids[a]);
            for c in &fit.centroids {
                prop_assert!(own <= d(c) + 1e-6);
            }
        }
        for w in fit.inertia_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-6 * w[0].abs().max(1.0));
        }
        prop_assert!(fit.sizes().iter().all(|&s| s > 0));
    }
}
