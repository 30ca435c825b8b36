use std::sync::Arc;

use proptest::prelude::*;
use proptest::test_runner::RngSeed;

use heatflow::basekernel::{landmark_neighbors, se_cross_kernel};
use heatflow::data::{parse_csv_dataset, write_csv_dataset, Dataset, PointCloud, Task};
use heatflow::gp::{logistic, predict_prob};
use heatflow::graph::{cross_similarity, row_normalize};
use heatflow::heatkernel::{CovarianceSource, HeatKernelCovariance};
use heatflow::spectral::truncated_svd;
use heatflow::subsample::{default_kmeans_tol, kmeans_lloyd, random_subsample};

fn cloud_strategy(max_n: usize) -> impl Strategy<Value = PointCloud> {
    (1usize..=3, 12usize..=max_n).prop_flat_map(|(p, n)| {
        prop::collection::vec(-5.0f64..5.0, n * p).prop_map(move |pts| PointCloud::new(pts, p).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 64,
        rng_seed: RngSeed::Fixed(20),
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn csv_round_trip(
        cloud in cloud_strategy(30),
        frac in 0.0f64..=1.0,
        class in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let n = cloud.n();
        let m = ((n as f64 * frac) as usize).max(1);
        let task = if class { Task::BinaryClassification } else { Task::Regression };
        let labels: Vec<f64> = (0..m)
            .map(|i| {
                let v = (seed.wrapping_add(i as u64) % 1000) as f64;
                if class { (v as u64 % 2) as f64 } else { v / 7.0 - 50.0 }
            })
            .collect();
        let ds = Dataset::new(cloud, labels, task).unwrap();
        let mut buf = Vec::new();
        write_csv_dataset(&ds, &mut buf).unwrap();
        let back = parse_csv_dataset(buf.as_slice(), task).unwrap();
        prop_assert_eq!(back.n(), ds.n());
        prop_assert_eq!(back.labels(), ds.labels());
        for (a, b) in back.cloud.rows().zip(ds.cloud.rows()) {
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn transition_rows_are_stochastic_and_kernel_is_psd(
        cloud in cloud_strategy(80),
        s_frac in 0.1f64..0.5,
        r in 1usize..=4,
        eps_scale in 0.5f64..3.0,
        kmeans in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let s = ((cloud.n() as f64 * s_frac) as usize).max(2);
        let induced = if kmeans {
            kmeans_lloyd(&cloud, s, 30, default_kmeans_tol(&cloud), seed).unwrap()
        } else {
            random_subsample(&cloud, s, seed).unwrap()
        };
        let r = r.min(induced.s());
        let nbrs = landmark_neighbors(&cloud, &induced, r).unwrap();
        let eps = nbrs.median_rth_distance().max(1e-2) * eps_scale;
        // A bandwidth that underflows every kernel value of a point is rejected.
        let k = se_cross_kernel(&nbrs, eps);
        prop_assume!(k.is_ok());
        let a = cross_similarity(&k.unwrap(), &induced.counts).unwrap();
        let tp = row_normalize(&a);
        prop_assume!(tp.is_ok());
        let tp = tp.unwrap();
        for sum in tp.z.row_sums() {
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        let m = induced.s().min(6);
        let spectrum = truncated_svd(&tp, m, 1e-10, 5000, seed).unwrap();
        for &lam in spectrum.eigenvalues() {
            prop_assert!((-1e-10..=1.0 + 1e-10).contains(&lam));
        }
        let cov = HeatKernelCovariance::new(Arc::new(spectrum), 0.5, eps * eps).unwrap();
        let idx: Vec<usize> = (0..cloud.n().min(25)).collect();
        let c = cov.block(&idx, &idx).unwrap();
        prop_assert!((&c - c.transpose()).abs().max() < 1e-12);
        let min_eig = c.symmetric_eigenvalues().min();
        prop_assert!(min_eig > -1e-9 * c.abs().max().max(1.0));
    }

    #[test]
    fn predictive_probability_is_bounded_and_monotone(mu in -20.0f64..20.0, dmu in 0.0f64..5.0, var in 0.0f64..10.0) {
        let p = predict_prob(mu, var);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!(predict_prob(mu + dmu, var) >= p - 1e-12);
        prop_assert!((predict_prob(mu, 0.0) - logistic(mu)).abs() < 1e-12);
    }
}
