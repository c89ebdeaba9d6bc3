//! Property tests for the structural invariants.

use proptest::prelude::*;

use omar_core::data::{ClusterData, Household};
use omar_core::estimands::{indirect_rule, outcome_surface, policy_weight, Estimand, Target};
use omar_core::loss::{LossConfig, LossTable, PsiVariant};
use omar_core::nuisance::undersample;
use omar_core::solver::winsorize;
use omar_core::Dataset;

fn cluster_of(n: usize) -> ClusterData {
    let hh = (0..n).map(|j| Household { y: 0, a: 0, x: vec![j as f64] }).collect();
    ClusterData::new(format!("p{n}"), hh).unwrap()
}

proptest! {
    #[test]
    fn policy_weights_normalize(n in 1usize..=10, alpha in 0.0f64..=1.0) {
        let total: f64 = (0..(1usize << n))
            .map(|mask| {
                let v: Vec<u8> = (0..n).map(|j| ((mask >> j) & 1) as u8).collect();
                policy_weight(&v, alpha).unwrap()
            })
            .sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn surface_of_bounded_mu_is_bounded_and_omars_ordered(
        n in 2usize..=6,
        ego_gain in 0.0f64..=0.5,
        peer_gain in 0.0f64..=0.5,
        base in 0.0f64..=0.5,
        tau in 0.0f64..=1.0,
    ) {
        let c = cluster_of(n);
        let mu = move |a: u8, pf: f64, _: &ClusterData, _: usize| {
            (base + ego_gain * a as f64 + peer_gain * pf).min(1.0)
        };
        for estimand in [Estimand::Overall, Estimand::Spillover] {
            let s = outcome_surface(&mu, &c, estimand, 0.01).unwrap();
            for v in s.values() {
                prop_assert!((0.0..=1.0 + 1e-12).contains(v));
            }
            // Monotone mu gives a monotone surface.
            for w in s.values().windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-10);
            }
        }
        let t = Target::new(tau).unwrap();
        let ov = indirect_rule(&mu, &c, t, Estimand::Overall, 0.01).unwrap();
        let so = indirect_rule(&mu, &c, t, Estimand::Spillover, 0.01).unwrap();
        prop_assert!(so >= ov);
        prop_assert!((0.0..=1.0).contains(&ov));
    }

    #[test]
    fn convex_split_identity_everywhere(
        cells in prop::collection::vec(-3.0f64..3.0, 2..8),
        tau in 0.0f64..=1.0,
        t in -2.0f64..2.0,
    ) {
        let table = LossTable::from_cell_means(
            LossConfig::new(
                Estimand::Overall,
                PsiVariant::DoublyRobust,
                Target::new(tau).unwrap(),
                0.1,
            )
            .unwrap(),
            vec![[cells.clone(), cells.iter().map(|v| -v).collect()]],
        )
        .unwrap();
        let (lp, lm, _) = table.convex_split(0, t);
        prop_assert!((lp - lm - table.loss(0, t)).abs() <= 1e-9);
        // The certified shift keeps the in-range loss non-negative.
        if (0.0..=1.0).contains(&t) {
            prop_assert!(table.loss(0, t) >= 1.0 - 1e-6);
        }
    }

    #[test]
    fn winsorize_is_idempotent_and_bounded(t in -10.0f64..10.0) {
        let w = winsorize(t);
        prop_assert!((0.0..=1.0).contains(&w));
        prop_assert_eq!(winsorize(w), w);
    }

    #[test]
    fn undersample_caps_sizes_at_median_and_is_deterministic(
        sizes in prop::collection::vec(1usize..=12, 3..=8),
        seed in 0u64..1000,
    ) {
        let clusters: Vec<ClusterData> = sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let hh = (0..n).map(|j| Household { y: 0, a: (j % 2) as u8, x: vec![j as f64] }).collect();
                ClusterData::new(format!("c{i}"), hh).unwrap()
            })
            .collect();
        let data = Dataset::new(clusters).unwrap();
        let mut sorted = sizes.clone();
        sorted.sort_unstable();
        let target = (sorted[(sorted.len() - 1) / 2] + sorted[sorted.len() / 2]) / 2;
        let a = undersample(&data, seed).unwrap();
        let b = undersample(&data, seed).unwrap();
        prop_assert_eq!(&a, &b);
        for (c, &n) in a.clusters().iter().zip(&sizes) {
            prop_assert_eq!(c.n(), n.min(target.max(1)));
        }
    }
}
