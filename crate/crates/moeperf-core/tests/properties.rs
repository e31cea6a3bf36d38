//! Property tests over the routing, scheduling, pruning, and cost-model
//! invariants.

use proptest::prelude::*;

use moeperf_core::config::{load_model_preset, ModelConfig, RouterKind};
use moeperf_core::pruning::{build_mask, PruneStrategy};
use moeperf_core::roofline::{ffn_flops, ffn_io, RooflineQuery};
use moeperf_core::routing::{expected_distinct_experts, route, RouterConfig};
use moeperf_core::schedule::{build_schedule, SkipTuple};

fn distinct_logits(n: usize) -> impl Strategy<Value = Vec<f64>> {
    // draw integers and scale so values are pairwise distinct
    proptest::collection::vec(-1000i32..1000, n).prop_filter_map("distinct", |v| {
        let mut seen = v.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() == v.len() {
            Some(v.into_iter().map(|x| f64::from(x) / 100.0).collect())
        } else {
            None
        }
    })
}

proptest! {
    #[test]
    fn route_is_permutation_equivariant(
        logits in distinct_logits(12),
        perm_seed in 0u64..1000,
    ) {
        let cfg = RouterConfig::default_for(RouterKind::Softmax, 12, 4);
        let base = route(&logits, &cfg).unwrap();

        // deterministic permutation from the seed
        let mut perm: Vec<usize> = (0..12).collect();
        let mut state = perm_seed.wrapping_add(0x9e3779b97f4a7c15);
        for i in (1..perm.len()).rev() {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            perm.swap(i, (state % (i as u64 + 1)) as usize);
        }
        let mut permuted = vec![0.0; 12];
        for (orig, &dest) in perm.iter().enumerate() {
            permuted[dest] = logits[orig];
        }
        let moved = route(&permuted, &cfg).unwrap();
        let mapped: Vec<u32> = base.selected.iter().map(|&i| perm[i as usize] as u32).collect();
        prop_assert_eq!(moved.selected, mapped);
    }

    #[test]
    fn softmax_selection_invariant_under_positive_scaling(
        logits in distinct_logits(10),
        scale in 0.01f64..50.0,
    ) {
        let cfg = RouterConfig::default_for(RouterKind::Softmax, 10, 3);
        let base = route(&logits, &cfg).unwrap();
        let scaled: Vec<f64> = logits.iter().map(|v| v * scale).collect();
        let s = route(&scaled, &cfg).unwrap();
        let mut a = base.selected;
        let mut b = s.selected;
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn normalized_weights_sum_to_one(
        logits in proptest::collection::vec(-5.0f64..5.0, 16),
        kind in prop_oneof![Just(RouterKind::Softmax), Just(RouterKind::Sigmoid)],
    ) {
        let cfg = RouterConfig::default_for(kind, 16, 5);
        let d = route(&logits, &cfg).unwrap();
        let sum: f64 = d.weights.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        prop_assert!(d.weights.iter().all(|&w| w > 0.0));
        prop_assert_eq!(d.selected.len(), 5);
    }

    #[test]
    fn expected_distinct_monotone_and_bounded(
        n_a in 1u32..=16,
        t1 in 0u64..500,
        dt in 0u64..500,
    ) {
        let lo = expected_distinct_experts(16.max(n_a), n_a, t1).unwrap();
        let hi = expected_distinct_experts(16.max(n_a), n_a, t1 + dt).unwrap();
        prop_assert!(lo <= hi + 1e-9);
        prop_assert!(hi <= f64::from(16.max(n_a)) + 1e-9);
    }

    #[test]
    fn schedule_anchors_and_segment_monotonicity(
        b in 1u32..=8,
        h in 1u32..=8,
        e in 1u32..=8,
        p in 1u32..=26,
    ) {
        let t = SkipTuple::new(b, h, e, p);
        let s = build_schedule(t, 26).unwrap();
        prop_assert_eq!(s.n_a_per_layer.len(), 26);
        prop_assert_eq!(s.n_a_per_layer[(p - 1) as usize], h);
        if p != 1 {
            prop_assert_eq!(s.n_a_per_layer[0], b);
        }
        if p != 26 {
            prop_assert_eq!(s.n_a_per_layer[25], e);
        }
        for w in s.n_a_per_layer[..p as usize].windows(2) {
            if h >= b { prop_assert!(w[1] >= w[0]); } else { prop_assert!(w[1] <= w[0]); }
        }
        for w in s.n_a_per_layer[(p - 1) as usize..].windows(2) {
            if e >= h { prop_assert!(w[1] >= w[0]); } else { prop_assert!(w[1] <= w[0]); }
        }
        let mean = s.average_active();
        prop_assert!(mean >= 1.0 && mean <= 8.0);
    }

    #[test]
    fn eq3_formulas_are_linear_in_tokens(
        d in 1u64..4096,
        d_i in 1u64..16384,
        tokens in 1u64..10000,
    ) {
        let q1 = RooflineQuery::new(d, d_i, tokens).unwrap();
        let q2 = RooflineQuery::new(d, d_i, 2 * tokens).unwrap();
        prop_assert_eq!(ffn_flops(q2), 2 * ffn_flops(q1));
        prop_assert_eq!(ffn_io(q2) - ffn_io(q1), 2 * tokens * (d + d_i));
    }

    #[test]
    fn structured_masks_are_layer_uniform(
        keep in 6u32..=32,
        n_layers in 1u32..20,
    ) {
        for strategy in [
            PruneStrategy::Odd,
            PruneStrategy::Even,
            PruneStrategy::FirstHalf,
            PruneStrategy::LastHalf,
        ] {
            let m = build_mask(strategy, keep, 64, 6, n_layers, None, None).unwrap();
            prop_assert!(m.layers.windows(2).all(|w| w[0] == w[1]));
            prop_assert_eq!(m.layers[0].len(), keep as usize);
        }
    }

    #[test]
    fn random_masks_deterministic_per_seed(seed in 0u64..500) {
        let a = build_mask(PruneStrategy::Random, 12, 64, 6, 6, Some(seed), None).unwrap();
        let b = build_mask(PruneStrategy::Random, 12, 64, 6, 6, Some(seed), None).unwrap();
        prop_assert_eq!(a.to_json_string(), b.to_json_string());
    }

    #[test]
    fn model_config_text_round_trip(
        d in 1u64..10000,
        d_e in 1u64..10000,
        d_s in 1u64..40000,
        n_a in 1u32..=8,
        bytes in 1u32..=4,
        normalize in proptest::bool::ANY,
        kind in prop_oneof![Just(RouterKind::Softmax), Just(RouterKind::Sigmoid)],
    ) {
        let cfg = ModelConfig {
            name: "prop".into(),
            d,
            d_e,
            d_s,
            n_e: 64,
            n_a,
            n_layers_total: 27,
            n_layers_dense: 1,
            router_kind: kind,
            normalize_selected: normalize,
            group_config: None,
            bytes_per_element: bytes,
        };
        let parsed = ModelConfig::from_config_str(&cfg.to_config_string()).unwrap();
        prop_assert_eq!(parsed, cfg);
    }
}

#[test]
fn reduction_bound_monotone_over_preset_grid() {
    let base = load_model_preset("v2-lite").unwrap();
    let mut last = 0.0;
    for n_a in 1..=64 {
        let mut c = base.clone();
        c.n_a = n_a;
        let r = c.compute_reduction_upper_bound();
        assert!(r > last);
        last = r;
    }
}
