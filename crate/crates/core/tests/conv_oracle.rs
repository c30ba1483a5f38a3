mod common;

use common::*;
use condensenext_core::analysis::node_cost;
use condensenext_core::arch::{build, LayerKind, ModelSpec, Variant};
use condensenext_core::ops::{self, ConvConfig, GroupMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;

fn random_cfg(rng: &mut ChaCha8Rng, mode: &str) -> ConvConfig {
    let k = [1, 3, 5][rng.random_range(0..3)];
    let pad = rng.random_range(0..=k / 2);
    let stride = rng.random_range(1..=2);
    let cfg = match mode {
        "standard" => ConvConfig::standard(rng.random_range(1..5), rng.random_range(1..6), k, pad),
        "grouped" => {
            let g = rng.random_range(1..4);
            ConvConfig::grouped(g * rng.random_range(1..3), g * rng.random_range(1..3), k, g, pad)
        }
        "depthwise" => ConvConfig::depthwise(rng.random_range(1..6), k, pad),
        _ => return ConvConfig::pointwise(rng.random_range(1..6), rng.random_range(1..6)),
    };
    cfg.with_stride(stride)
}

fn oracle_cases(mode: &str, n: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(mode.len() as u64);
    for case in 0..n {
        let cfg = random_cfg(&mut rng, mode);
        let side = rng.random_range(cfg.kernel_size.max(2)..9);
        let x = random(&[rng.random_range(1..3), cfg.in_channels, side, side], case as u64);
        let w = random(&cfg.weight_shape(), 1000 + case as u64);
        let (want, shape, _) = direct_conv(&x, &w, &cfg);
        // The kernels are generic; f64 isolates indexing errors from rounding.
        let y = ops::conv2d(&x.cast::<f64>(), &w.cast::<f64>(), &cfg).unwrap();
        assert_eq!(y.shape(), shape.as_slice(), "{mode} case {case}: {cfg:?}");
        let err = want.iter().zip(y.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < TOL, "{mode} case {case}: {cfg:?} error {err}");
        // Single precision agrees up to accumulated rounding.
        let y32 = ops::conv2d(&x, &w, &cfg).unwrap();
        let scale = want.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        assert!(max_abs_diff(&want, y32.data()) < 1e-5 * scale * 10.0, "{mode} case {case}: f32");
    }
}

#[test]
fn standard_matches_direct_loops() {
    oracle_cases("standard", 200);
}

#[test]
fn grouped_matches_direct_loops() {
    oracle_cases("grouped", 200);
}

#[test]
fn depthwise_matches_direct_loops() {
    oracle_cases("depthwise", 200);
}

#[test]
fn pointwise_matches_direct_loops() {
    oracle_cases("pointwise", 200);
}

#[test]
fn grouped_equals_block_diagonal_standard() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..50 {
        let cfg = random_cfg(&mut rng, "grouped");
        let x = random(&[2, cfg.in_channels, 7, 7], case);
        let w = random(&cfg.weight_shape(), 50 + case);
        let dense_cfg = ConvConfig {
            groups: 1,
            mode: ops::ConvMode::Standard,
            ..cfg
        };
        let a = ops::conv2d(&x, &w, &cfg).unwrap();
        let b = ops::conv2d(&x, &block_diagonal(&w, &cfg), &dense_cfg).unwrap();
        let err = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max);
        assert!(err < 1e-5, "case {case}: {err}");
    }
}

#[test]
fn grouped_equals_sliced_convolutions() {
    let cfg = ConvConfig::grouped(6, 9, 3, 3, 1);
    let x = random(&[2, 6, 5, 5], 1);
    let w = random(&cfg.weight_shape(), 2);
    let y = ops::conv2d(&x, &w, &cfg).unwrap();
    let parts: Vec<_> = (0..3)
        .map(|g| {
            let xs = slice_channels(&x, 2 * g, 2 * g + 2);
            let ws = condensenext_core::Tensor::from_vec(&[3, 2, 3, 3], w.data()[g * 54..(g + 1) * 54].to_vec()).unwrap();
            ops::conv2d(&xs, &ws, &ConvConfig::standard(2, 3, 3, 1)).unwrap()
        })
        .collect();
    let want = concat_channels(&parts);
    assert!(y.data().iter().zip(want.data()).all(|(a, b)| (a - b).abs() < 1e-5));
}

#[test]
fn learned_group_conv_equals_masked_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..50 {
        let g = rng.random_range(1..5);
        let (i, o) = (rng.random_range(1..12), g * rng.random_range(1..4));
        let kept: Vec<Vec<usize>> = (0..g).map(|_| (0..i).filter(|_| rng.random_bool(0.6)).collect()).collect();
        let mask = GroupMask {
            groups: g,
            in_channels: i,
            kept,
        };
        let x = random(&[2, i, 3, 3], case);
        let mut w = random(&[o, i], 100 + case);
        let dense = masked_dense(&w, &mask);
        let y = ops::learned_group_conv(&x, &w, &mask).unwrap();
        let want = ops::conv2d(&x, &dense, &ConvConfig::pointwise(i, o)).unwrap();
        assert!(y.data().iter().zip(want.data()).all(|(a, b)| (a - b).abs() < 1e-5), "case {case}");

        // Pruned entries are never read.
        for oc in 0..o {
            for ic in 0..i {
                if !mask.kept[oc % g].contains(&ic) {
                    w.data_mut()[oc * i + ic] = f32::NAN;
                }
            }
        }
        let y2 = ops::learned_group_conv(&x, &w, &mask).unwrap();
        assert_eq!(y.data(), y2.data());
    }
}

#[test]
fn multiply_count_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for mode in ["standard", "grouped", "depthwise", "pointwise"] {
        for case in 0..25 {
            let mut cfg = random_cfg(&mut rng, mode);
            // Padding makes border taps skip work the closed form charges for.
            cfg.padding = 0;
            let side = rng.random_range(cfg.kernel_size..10);
            let x = random(&[1, cfg.in_channels, side, side], case);
            let w = random(&cfg.weight_shape(), case + 7);
            let (_, shape, mults) = direct_conv(&x, &w, &cfg);
            assert_eq!(mults, closed_form_macs(&cfg, shape[2]), "{mode} {cfg:?}");
        }
    }
}

#[test]
fn analysis_costs_match_instrumented_oracle() {
    // A toy graph: every convolution's reported MACs equal the oracle's multiply count.
    let spec = ModelSpec {
        stages: vec![(2, 4), (1, 8)],
        init_channels: 8,
        input_shape: (3, 8, 8),
        ..ModelSpec::cifar(Variant::CondenseNeXt)
    };
    for variant in [Variant::Baseline, Variant::CondenseNeXt] {
        let graph = build(&spec.with_variant(variant), 1).unwrap();
        let mut checked = 0;
        for node in graph.nodes() {
            let LayerKind::Conv(cfg) = node.kind else { continue };
            let [c, h, w] = node.in_shape;
            let x = random(&[1, c, h, w], node.id as u64);
            let wt = random(&cfg.weight_shape(), 3);
            let (_, _, mults) = direct_conv(&x, &wt, &cfg);
            let padded_taps_skipped = cfg.padding > 0;
            let (flops, _) = node_cost(&node);
            if padded_taps_skipped {
                // The closed form charges border taps that fall on padding.
                assert!(flops >= mults, "{}: {flops} < {mults}", node.name);
                let mut unpadded = cfg;
                unpadded.padding = 0;
                let (hp, wp) = (h + 2 * cfg.padding, w + 2 * cfg.padding);
                let xp = random(&[1, c, hp, wp], 4);
                let (_, _, full) = direct_conv(&xp, &wt, &unpadded);
                assert_eq!(flops, full, "{}", node.name);
            } else {
                assert_eq!(flops, mults, "{}", node.name);
            }
            checked += 1;
        }
        assert!(checked > 3);
    }
}

#[test]
fn separable_cost_ratio() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (i, o, d) = (rng.random_range(1..256u64), rng.random_range(1..256u64), rng.random_range(1..33u64));
        let standard = closed_form_macs(&ConvConfig::standard(i as usize, o as usize, 3, 1), d as usize);
        let dsc = closed_form_macs(&ConvConfig::depthwise(i as usize, 3, 1), d as usize)
            + closed_form_macs(&ConvConfig::pointwise(i as usize, o as usize), d as usize);
        // dsc / standard = 1/O + 1/9, compared exactly by cross-multiplying.
        assert_eq!(9 * o * dsc, standard * (9 + o));
    }
}

#[test]
fn strided_pointwise_is_rejected() {
    let x = random(&[1, 2, 4, 4], 0);
    let w = random(&[3, 2], 1);
    assert!(ops::conv2d(&x, &w, &ConvConfig::pointwise(2, 3).with_stride(2)).is_err());
}

#[test]
fn cost_examples() {
    let std = ConvConfig::standard(16, 32, 3, 1);
    assert_eq!(closed_form_macs(&std, 32), 4_718_592);
    let dsc = closed_form_macs(&ConvConfig::depthwise(16, 3, 1), 32) + closed_form_macs(&ConvConfig::pointwise(16, 32), 32);
    assert_eq!(dsc, 671_744);
}
