//! Property tests for the pure numeric operations.

use proptest::prelude::*;

use cascade_core::gate::{calibrate_threshold, confidence_score, consistency_score, exit_ratio};
use cascade_core::pruner::{avg_retention, kept_count, make_directive, rank_tokens, RankingSource};

proptest! {
    /// Re-ranking a permuted vector permutes the ranking consistently: the
    /// values read off in rank order are identical.
    #[test]
    fn rank_is_permutation_consistent(values in prop::collection::vec(0.0_f64..1.0, 2..32)) {
        // Deduplicate to make the ordering strict.
        let mut distinct = values;
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distinct.dedup();
        prop_assume!(distinct.len() >= 2);

        let base_rank = rank_tokens(&distinct).unwrap();
        let mut permuted = distinct.clone();
        permuted.rotate_left(1);
        let perm_rank = rank_tokens(&permuted).unwrap();

        for (a, b) in base_rank.iter().zip(&perm_rank) {
            prop_assert_eq!(distinct[*a], permuted[*b]);
        }
    }

    #[test]
    fn ranking_is_always_a_permutation(values in prop::collection::vec(-1.0e6_f64..1.0e6, 1..64)) {
        let rank = rank_tokens(&values).unwrap();
        let mut seen = vec![false; values.len()];
        for &i in &rank {
            prop_assert!(!seen[i]);
            seen[i] = true;
        }
        for w in rank.windows(2) {
            prop_assert!(values[w[0]] >= values[w[1]]);
        }
    }

    #[test]
    fn kept_count_is_clamped_and_monotone(n in 1_usize..512, r1 in 0.001_f64..1.0, r2 in 0.001_f64..1.0) {
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        let k_lo = kept_count(n, lo);
        let k_hi = kept_count(n, hi);
        prop_assert!(k_lo >= 1 && k_hi <= n);
        prop_assert!(k_lo <= k_hi);
    }

    /// Exact recovery: when every planted token strictly outweighs every
    /// other token and the kept budget covers them, the kept set contains
    /// the planted set.
    #[test]
    fn planted_mass_guarantees_recovery(
        n in 4_usize..64,
        planted_count in 1_usize..4,
        seed in 0_u64..1000,
    ) {
        prop_assume!(planted_count < n);
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut importance: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let planted: Vec<usize> = {
            let mut cells: Vec<usize> = (0..n).collect();
            (0..planted_count).map(|_| cells.swap_remove(rng.gen_range(0..cells.len()))).collect()
        };
        for &p in &planted {
            importance[p] += 2.0;
        }
        let retain = planted_count as f64 / n as f64 + 0.02;
        let d = make_directive(rank_tokens(&importance).unwrap(), retain.min(1.0), 2, n, RankingSource::Aggregated).unwrap();
        prop_assume!(d.kept.len() >= planted_count);
        for p in planted {
            prop_assert!(d.kept.contains(&p), "planted {} missing from {:?}", p, d.kept);
        }
    }

    #[test]
    fn retention_is_monotone_in_both_arguments(
        layers in 2_usize..64,
        k in 1_usize..64,
        r in 0.01_f64..1.0,
        dk in 0_usize..8,
        dr in 0.0_f64..0.5,
    ) {
        let k = k.min(layers);
        let k2 = (k + dk).min(layers);
        let r2 = (r + dr).min(1.0);
        let base = avg_retention(layers, k, r);
        prop_assert!(avg_retention(layers, k2, r) >= base - 1e-12);
        prop_assert!(avg_retention(layers, k, r2) >= base - 1e-12);
        prop_assert!((avg_retention(layers, layers, r) - 1.0).abs() < 1e-12);
        prop_assert!((avg_retention(layers, k, 1.0) - 1.0).abs() < 1e-12);
    }

    /// Confidence and consistency scores ignore step order.
    #[test]
    fn scores_are_permutation_invariant(probs in prop::collection::vec(0.01_f64..=1.0, 1..16)) {
        let conf = confidence_score(&probs).unwrap();
        let cons = consistency_score(&probs).unwrap();
        let mut shuffled = probs.clone();
        shuffled.reverse();
        prop_assert!((confidence_score(&shuffled).unwrap() - conf).abs() < 1e-12);
        prop_assert!((consistency_score(&shuffled).unwrap() - cons).abs() < 1e-9);
        prop_assert!(conf > 0.0 && conf <= 1.0);
        prop_assert!(cons > 0.0 && cons <= 1.0);
    }

    /// Calibration realizes its target within 1/n on distinct scores.
    #[test]
    fn calibration_realizes_targets(seed in 0_u64..500, target in 0.0_f64..=1.0) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(10..400);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let t = calibrate_threshold(&scores, target);
        let realized = exit_ratio(&scores, t);
        prop_assert!((realized - target).abs() <= 1.0 / n as f64 + 1e-12,
            "target {} realized {} on {} scores", target, realized, n);
    }
}
