//! Property tests for the allocation, scoring, and selection invariants.

use proptest::prelude::*;

use maskkv_core::budget::{
    allocate_heads, allocate_layers, baseline_allocate, default_boundary, plan_budget,
    BaselinePolicy, BudgetConfig, CalibrationProfile,
};
use maskkv_core::eviction::select_keep_set;
use maskkv_core::scoring::{mask_attention, mask_voting, MaskAttention, MaskSegment};

fn profile_strategy(
    max_layers: usize,
    max_heads: usize,
) -> impl Strategy<Value = CalibrationProfile> {
    (1..=max_layers, 1..=max_heads).prop_flat_map(|(d, h)| {
        (
            prop::collection::vec(0.0f64..2.0, d),
            prop::collection::vec(prop::collection::vec(0.0f64..1.0, h), d),
        )
            .prop_map(|(layer_importance, head_preference)| CalibrationProfile {
                layer_importance,
                head_preference,
                sample_count: 1,
                source: "proptest".into(),
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn layer_budgets_conserve_exactly(
        total in 0usize..4096,
        beta in 0.0f64..=1.0,
        profile in profile_strategy(16, 1),
    ) {
        let boundary = default_boundary(profile.num_layers());
        let (budgets, _) =
            allocate_layers(total, beta, &profile.layer_importance, &boundary).unwrap();
        prop_assert_eq!(budgets.iter().sum::<usize>(), total);
    }

    #[test]
    fn head_budgets_conserve_exactly(
        layer_budget in 0usize..512,
        alpha in 0.0f64..=1.0,
        prefs in prop::collection::vec(0.0f64..1.0, 1..16),
    ) {
        let (budgets, _) = allocate_heads(layer_budget, alpha, &prefs).unwrap();
        prop_assert_eq!(budgets.iter().sum::<usize>(), prefs.len() * layer_budget);
    }

    #[test]
    fn full_plan_conserves_exactly(
        total in 0usize..4096,
        alpha in 0.0f64..=1.0,
        beta in 0.0f64..=1.0,
        profile in profile_strategy(16, 16),
    ) {
        let config = BudgetConfig {
            total_budget: total,
            alpha,
            beta,
            boundary_layers: None,
            baseline: None,
        };
        let plan = plan_budget(&config, &profile).unwrap();
        prop_assert_eq!(plan.layer_budgets.iter().sum::<usize>(), total);
        for (l, heads) in plan.head_budgets.iter().enumerate() {
            prop_assert_eq!(
                heads.iter().sum::<usize>(),
                profile.num_heads() * plan.layer_budgets[l]
            );
        }
    }

    #[test]
    fn degenerate_rates_reduce_to_uniform_baseline(
        total in 0usize..2048,
        profile in profile_strategy(12, 8),
    ) {
        let config = BudgetConfig {
            total_budget: total,
            alpha: 1.0,
            beta: 1.0,
            boundary_layers: None,
            baseline: None,
        };
        let plan = plan_budget(&config, &profile).unwrap();
        let uniform = baseline_allocate(
            BaselinePolicy::Uniform,
            total,
            profile.num_layers(),
            profile.num_heads(),
            Some(&profile),
        )
        .unwrap();
        prop_assert_eq!(plan.layer_budgets, uniform.layer_budgets);
        prop_assert_eq!(plan.head_budgets, uniform.head_budgets);
    }

    #[test]
    fn higher_preference_never_gets_less(
        layer_budget in 0usize..256,
        alpha in 0.0f64..0.999,
        prefs in prop::collection::vec(0.0f64..1.0, 2..12),
    ) {
        let (budgets, _) = allocate_heads(layer_budget, alpha, &prefs).unwrap();
        for a in 0..prefs.len() {
            for b in 0..prefs.len() {
                if prefs[a] > prefs[b] {
                    prop_assert!(
                        budgets[a] >= budgets[b],
                        "head {a} (pref {}) got {} < head {b} (pref {}) got {}",
                        prefs[a], budgets[a], prefs[b], budgets[b]
                    );
                }
            }
        }
    }

    #[test]
    fn boundary_dominance_under_bimodal_profiles(
        total in 0usize..2048,
        beta in 0.0f64..0.999,
        d in 3usize..12,
        low in 0.0f64..0.4,
        high in 0.6f64..2.0,
    ) {
        let mut importance = vec![low; d];
        importance[0] = high;
        importance[d - 1] = high;
        let boundary = vec![0, d - 1];
        let (budgets, _) = allocate_layers(total, beta, &importance, &boundary).unwrap();
        let min_bound = budgets[0].min(budgets[d - 1]);
        let max_mid = budgets[1..d - 1].iter().copied().max().unwrap_or(0);
        prop_assert!(min_bound >= max_mid, "boundary {min_bound} < middle {max_mid}");
    }

    #[test]
    fn voting_is_permutation_equivariant(
        rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 6), 1..6),
        swap in (0usize..6, 0usize..6),
    ) {
        // Normalize rows so the attention is row-stochastic.
        let rows: Vec<Vec<f64>> = rows
            .into_iter()
            .map(|r| {
                let z: f64 = r.iter().sum();
                r.into_iter().map(|x| x / z).collect()
            })
            .collect();
        let n_m = rows.len();
        let a = MaskAttention { rows: rows.clone(), n_p: 6, n_m };
        let base = mask_voting(&a, MaskSegment::All).scores;

        let (i, j) = swap;
        let mut permuted_rows = rows;
        for row in &mut permuted_rows {
            row.swap(i, j);
        }
        let a2 = MaskAttention { rows: permuted_rows, n_p: 6, n_m };
        let permuted = mask_voting(&a2, MaskSegment::All).scores;

        let mut expected = base;
        expected.swap(i, j);
        for (x, y) in permuted.iter().zip(&expected) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn importance_bounds_hold(
        q in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..8),
        k in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..12),
    ) {
        let a = mask_attention(&q, &k, 4).unwrap();
        let importance = mask_voting(&a, MaskSegment::All);
        for &score in &importance.scores {
            prop_assert!(score >= 0.0);
            prop_assert!(score <= a.n_m as f64 + 1e-9);
        }
    }

    #[test]
    fn attention_rows_are_stochastic(
        q in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..6),
        k in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..10),
    ) {
        let a = mask_attention(&q, &k, 3).unwrap();
        for row in &a.rows {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn keep_sets_nest(
        scores in prop::collection::vec(0.0f64..1.0, 1..24),
        k in 0usize..24,
    ) {
        let k = k.min(scores.len().saturating_sub(1));
        let small = select_keep_set(&scores, k);
        let large = select_keep_set(&scores, k + 1);
        prop_assert!(small.iter().all(|p| large.binary_search(p).is_ok()));
    }

    #[test]
    fn top_k_is_optimal_for_small_inputs(
        scores in prop::collection::vec(0.0f64..1.0, 1..12),
        k in 0usize..12,
    ) {
        let n = scores.len();
        let k = k.min(n);
        let keep = select_keep_set(&scores, k);
        let kept: f64 = keep.iter().map(|&p| scores[p]).sum();
        let mut best = 0.0f64;
        for subset in 0u32..(1 << n) {
            if subset.count_ones() as usize != k {
                continue;
            }
            let mass: f64 = (0..n).filter(|&i| subset & (1 << i) != 0).map(|i| scores[i]).sum();
            best = best.max(mass);
        }
        prop_assert!(kept >= best - 1e-12);
    }

    #[test]
    fn positive_scaling_preserves_single_row_top1(
        q in prop::collection::vec(-2.0f64..2.0, 4),
        k in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 2..10),
        scale in 0.1f64..10.0,
    ) {
        let a = mask_attention(&[q.clone()], &k, 4).unwrap();
        let i = mask_voting(&a, MaskSegment::All);
        let scaled_q: Vec<f64> = q.iter().map(|x| x * scale).collect();
        let a2 = mask_attention(&[scaled_q], &k, 4).unwrap();
        let i2 = mask_voting(&a2, MaskSegment::All);

        let top = select_keep_set(&i.scores, 1);
        let top2 = select_keep_set(&i2.scores, 1);
        prop_assert_eq!(top, top2);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn profile_text_round_trips(profile in profile_strategy(6, 6)) {
        let mut buf = Vec::new();
        maskkv_core::budget::write_profile(&profile, &mut buf).unwrap();
        let loaded = maskkv_core::budget::read_profile(std::io::Cursor::new(&buf), "x").unwrap();
        let mut buf2 = Vec::new();
        maskkv_core::budget::write_profile(&loaded, &mut buf2).unwrap();
        prop_assert_eq!(buf, buf2);
    }
}
