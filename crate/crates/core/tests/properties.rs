mod common;

use common::*;
use condensenext_core::arch::{build, ForwardMode, ModelSpec, Variant};
use condensenext_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use condensenext_core::compression::{prune_target_total, select_prune, LgcState, PrunePolicy};
use condensenext_core::ops::{relu6, relu6_scalar};
use condensenext_core::train::{cb_focal_loss, cosine_lr, cross_entropy, ClassCounts};
use condensenext_core::{Tape, Tensor};
use proptest::prelude::*;

fn toy_spec(variant: Variant) -> ModelSpec {
    ModelSpec {
        stages: vec![(2, 4), (1, 8)],
        init_channels: 8,
        input_shape: (3, 8, 8),
        ..ModelSpec::cifar(variant)
    }
}

fn variant_strategy() -> impl Strategy<Value = Variant> {
    prop_oneof![Just(Variant::Baseline), Just(Variant::CondenseNeXt)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn relu6_is_bounded(x in prop::num::f32::ANY) {
        let y = relu6_scalar(x);
        if x.is_nan() {
            prop_assert!(y.is_nan());
        } else {
            prop_assert!((0.0..=6.0).contains(&y));
            prop_assert_eq!(y, x.clamp(0.0, 6.0));
        }
    }

    #[test]
    fn final_stage_prunes_exactly_the_target(
        i in 1usize..40,
        g in 1usize..9,
        p in 0usize..6,
        extra in 0usize..8,
        cf in 2usize..6,
        seed in 0u64..1000,
    ) {
        // C − p < G keeps the total below the layer's G·I connections.
        let c = p + extra % g;
        prop_assume!(c > 0);
        let mut state = LgcState::new(0, g, i, c, p, cf, PrunePolicy::Cardinality).unwrap();
        let target = prune_target_total(&state).unwrap();
        prop_assert!(!target.saturated);
        let mut w = random(&[c, i], seed);
        for stage in 1..cf {
            let next = select_prune(&mut w, &state, stage).unwrap();
            for grp in 0..g {
                prop_assert_eq!(next.pruned_in_group(grp), stage * target.per_group[grp] / (cf - 1));
                // Masks only ever lose connections.
                prop_assert!((0..i).all(|k| next.mask[grp][k] <= state.mask[grp][k]));
            }
            state = next;
        }
        prop_assert_eq!(state.pruned_total(), i * (c - p));
    }

    #[test]
    fn pruning_lowers_param_count_by_masked_connections(variant in variant_strategy(), seed in 0u64..50, stage in 1usize..4) {
        let mut g = build(&toy_spec(variant), seed).unwrap();
        let dense = g.param_count();
        g.condense(stage).unwrap();
        let masked: usize = g.lgc_states().iter().map(|s| s.pruned_total() * (s.out_channels / s.groups)).sum();
        prop_assert_eq!(g.param_count(), dense - masked);
        prop_assert_eq!(g.dense_param_count(), dense);
    }

    #[test]
    fn pruned_weights_never_affect_outputs(variant in variant_strategy(), seed in 0u64..50, junk in -1e3f32..1e3) {
        let mut g = build(&toy_spec(variant), seed).unwrap();
        g.condense_all().unwrap();
        let x = random(&[2, 3, 8, 8], seed + 1);
        let before = g.predict(&x).unwrap();
        for b in g.blocks_mut() {
            let mask = b.lgc.weight.mask.clone().unwrap();
            for (v, keep) in b.lgc.weight.value.data_mut().iter_mut().zip(mask) {
                if !keep {
                    *v = junk;
                }
            }
        }
        let after = g.predict(&x).unwrap();
        prop_assert_eq!(before.data(), after.data());
    }

    #[test]
    fn checkpoint_round_trip_is_identity(variant in variant_strategy(), seed in 0u64..50, stage in 0usize..4, epoch in 0usize..300) {
        let mut g = build(&toy_spec(variant), seed).unwrap();
        if stage > 0 {
            g.condense(stage).unwrap();
        }
        let meta = CheckpointMeta { class_counts: (0..10).map(|k| k * 7 + 1).collect(), epoch, ..Default::default() };
        let bytes = save_checkpoint(&g, &meta, None);
        let back = load_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&back.meta, &meta);
        prop_assert!(back.graph == g);
        let x = random(&[1, 3, 8, 8], seed);
        let (a, b) = (g.predict(&x).unwrap(), back.graph.predict(&x).unwrap());
        prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        prop_assert_eq!(save_checkpoint(&back.graph, &back.meta, None), bytes);
    }

    #[test]
    fn focal_loss_without_focusing_or_balancing_is_cross_entropy(seed in 0u64..10_000, n in 1usize..9) {
        let logits = random(&[n, 10], seed).cast::<f64>();
        let labels: Vec<usize> = (0..n).map(|k| (seed as usize + 3 * k) % 10).collect();
        let counts = ClassCounts((0..10).map(|k| 1 + k * k).collect());
        let ce = cross_entropy(&logits, &labels).unwrap();
        let fl = cb_focal_loss(&logits, &labels, &counts, 0.0, 0.0).unwrap();
        prop_assert!((ce - fl).abs() < 1e-6);
    }

    #[test]
    fn concat_then_slice_round_trips(c1 in 1usize..5, c2 in 1usize..5, seed in 0u64..100) {
        let a = random(&[2, c1, 3, 3], seed);
        let b = random(&[2, c2, 3, 3], seed + 1);
        let mut tape = Tape::<f32>::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let cat = tape.concat_channels(&[va, vb]).unwrap();
        let y = tape.value(cat).clone();
        prop_assert_eq!(&y, &concat_channels(&[a.clone(), b.clone()]));
        prop_assert_eq!(slice_channels(&y, 0, c1), a);
        prop_assert_eq!(slice_channels(&y, c1, c1 + c2), b);
    }
}

#[test]
fn relu6_point_values_and_extremes() {
    let x = Tensor::from_vec(&[5], vec![-3.0f32, 2.5, 7.0, f32::MAX, f32::MIN]).unwrap();
    assert_eq!(relu6(&x).data(), &[0.0, 2.5, 6.0, 6.0, 0.0]);
    assert_eq!(relu6_scalar(f32::INFINITY), 6.0);
    assert_eq!(relu6_scalar(f32::NEG_INFINITY), 0.0);
}

#[test]
fn focal_hand_value() {
    // Two equal logits give p_t = 0.5; (1 − 0.5)² · ln 2 with unit class weights.
    let logits = Tensor::from_vec(&[1, 2], vec![0.0f64, 0.0]).unwrap();
    let v = cb_focal_loss(&logits, &[0], &ClassCounts(vec![1, 1]), 2.0, 0.0).unwrap();
    assert!((v - 0.25 * std::f64::consts::LN_2).abs() < 1e-6);
}

#[test]
fn cosine_is_monotone() {
    let lrs: Vec<f64> = (0..200).map(|e| cosine_lr(e, 200, 0.1)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    assert!((lrs[0] - 0.1).abs() < 1e-9);
    assert!((lrs[100] - 0.05).abs() < 1e-9);
}

#[test]
fn eval_forward_is_deterministic_and_batch_independent() {
    let g = build(&toy_spec(Variant::CondenseNeXt), 3).unwrap();
    let x = random(&[4, 3, 8, 8], 8);
    let all = g.predict(&x).unwrap();
    for n in 0..4 {
        let one = g.predict(&x.batch_item(n).unwrap().reshape(&[1, 3, 8, 8]).unwrap()).unwrap();
        for k in 0..10 {
            assert!((one.data()[k] - all.data()[n * 10 + k]).abs() < 1e-5);
        }
    }
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(x.clone());
    let f = g.forward(&mut tape, xv, ForwardMode::eval()).unwrap();
    assert_eq!(tape.value(f.logits).data(), all.data());
}
