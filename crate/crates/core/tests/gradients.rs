mod common;

use std::sync::Arc;

use common::*;
use condensenext_core::gradcheck::finite_diff_check;
use condensenext_core::ops::{ConvConfig, GroupMask};
use condensenext_core::train::{ClassCounts, LossKind};
use condensenext_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-3;
// The quotient is evaluated in f64, so a small step costs no precision.
const STEP: f64 = 1e-4;

fn assert_grads(name: &str, op: Op, args: Vec<Tensor<f32>>, wrt: &[usize], seed: u64) {
    for &k in wrt {
        let check = Check {
            op: op.clone(),
            args: args.clone(),
            wrt: k,
            coeff_seed: seed ^ 0xABCD,
        };
        let r = finite_diff_check(&check, check.point(), STEP, TOL).unwrap();
        let (i, e) = r.worst().unwrap_or((0, 0.0));
        assert!(
            r.passed,
            "{name} seed {seed} arg {k}: worst relative error {e:.2e} at {i} (analytic {}, numeric {})",
            r.analytic[i], r.numeric[i]
        );
    }
}

/// Keeps values at least `margin` away from the ReLU6 kinks at 0 and 6.
fn off_kinks(mut t: Tensor<f32>, margin: f32) -> Tensor<f32> {
    for v in t.data_mut() {
        for kink in [0.0, 6.0] {
            if (*v - kink).abs() < margin {
                *v = kink + if *v < kink { -margin } else { margin };
            }
        }
    }
    t
}

#[test]
fn standard_and_grouped_conv() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = rng.random_range(1..3);
        let cfg = ConvConfig::grouped(2 * g, 2 * g, 3, g, 1).with_stride(rng.random_range(1..3));
        let cfg = if g == 1 { ConvConfig { mode: condensenext_core::ops::ConvMode::Standard, ..cfg } } else { cfg };
        let args = vec![random(&[2, cfg.in_channels, 5, 5], seed), random(&cfg.weight_shape(), seed + 100)];
        assert_grads("conv", Op::Conv(cfg), args, &[0, 1], seed);
    }
}

#[test]
fn depthwise_and_pointwise_conv() {
    for seed in 0..SEEDS {
        let dw = ConvConfig::depthwise(3, 3, 1).with_stride(1 + (seed % 2) as usize);
        assert_grads("depthwise", Op::Conv(dw), vec![random(&[2, 3, 5, 5], seed), random(&dw.weight_shape(), seed + 1)], &[0, 1], seed);
        let pw = ConvConfig::pointwise(3, 4);
        assert_grads("pointwise", Op::Conv(pw), vec![random(&[2, 3, 3, 3], seed), random(&[4, 3], seed + 2)], &[0, 1], seed);
    }
}

fn random_mask(rng: &mut ChaCha8Rng, groups: usize, inputs: usize) -> GroupMask {
    GroupMask {
        groups,
        in_channels: inputs,
        kept: (0..groups).map(|_| (0..inputs).filter(|_| rng.random_bool(0.6)).collect()).collect(),
    }
}

#[test]
fn learned_group_conv() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = if seed % 4 == 0 { GroupMask::full(2, 6) } else { random_mask(&mut rng, 2, 6) };
        let args = vec![random(&[2, 6, 3, 3], seed), random(&[4, 6], seed + 1)];
        assert_grads("lgc", Op::Lgc(Arc::new(mask)), args, &[0, 1], seed);
    }
}

#[test]
fn batch_norm_and_fused_relu6() {
    for seed in 0..SEEDS {
        let x = random(&[3, 2, 3, 3], seed);
        let gamma = uniform(&[2], 0.5, 1.5, seed + 1);
        let beta = uniform(&[2], -0.5, 0.5, seed + 2);
        assert_grads("batch_norm", Op::BatchNorm, vec![x.clone(), gamma, beta], &[0, 1, 2], seed);

        // γ = 0.4 and β = 3 keep every output inside (0, 6): the standardized value
        // of 27 samples is bounded by √26 ≈ 5.1.
        let gamma = uniform(&[2], 0.3, 0.5, seed + 3);
        let beta = uniform(&[2], 2.8, 3.2, seed + 4);
        assert_grads("batch_norm_relu6", Op::BatchNormRelu6, vec![x, gamma, beta], &[0, 1, 2], seed);
    }
}

#[test]
fn relu6_away_from_kinks() {
    for seed in 0..SEEDS {
        let x = off_kinks(uniform(&[2, 3, 4, 4], -3.0, 9.0, seed), 0.05);
        assert_grads("relu6", Op::Relu6, vec![x], &[0], seed);
    }
}

#[test]
fn pooling_linear_and_softmax() {
    for seed in 0..SEEDS {
        assert_grads("avg_pool", Op::AvgPool(2), vec![random(&[2, 2, 4, 4], seed)], &[0], seed);
        assert_grads("global_avg_pool", Op::GlobalAvgPool, vec![random(&[2, 3, 3, 3], seed)], &[0], seed);
        let args = vec![random(&[3, 5], seed), random(&[4, 5], seed + 1), random(&[4], seed + 2)];
        assert_grads("linear", Op::Linear, args, &[0, 1, 2], seed);
        assert_grads("log_softmax", Op::LogSoftmax, vec![random(&[3, 5], seed)], &[0], seed);
        let args = vec![random(&[2, 2, 3, 3], seed), random(&[2, 3, 3, 3], seed + 1)];
        assert_grads("concat", Op::Concat, args, &[0, 1], seed);
        assert_grads("dropout", Op::Dropout { rate: 0.3, seed }, vec![random(&[2, 8], seed)], &[0], seed);
    }
}

#[test]
fn losses() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
        let counts = ClassCounts(vec![50, 10, 200, 5, 80]);
        for kind in [
            LossKind::CrossEntropy,
            LossKind::ClassBalancedFocal { gamma: 0.5, beta: 0.9999 },
            LossKind::ClassBalancedFocal { gamma: 2.0, beta: 0.99 },
        ] {
            let op = Op::Loss {
                kind,
                labels: labels.clone(),
                counts: counts.clone(),
            };
            assert_grads("loss", op, vec![random(&[4, 5], seed)], &[0], seed);
        }
    }
}

#[test]
fn composed_separable_block() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c_in, bottleneck, growth) = (4, 8, 4);
        let mask = if seed % 5 == 0 { GroupMask::full(4, c_in) } else { random_mask(&mut rng, 4, c_in) };
        let op = Op::Block {
            mask: Arc::new(mask),
            depthwise: ConvConfig::depthwise(bottleneck, 3, 1),
            pointwise: ConvConfig::pointwise(bottleneck, growth),
        };
        // Scales and shifts keep both fused activations strictly inside (0, 6);
        // 2·4·4 samples per channel bound the standardized values by √31 ≈ 5.6.
        let args = vec![
            random(&[2, c_in, 4, 4], seed),
            random(&[bottleneck, c_in], seed + 1),
            uniform(&[c_in], 0.3, 0.5, seed + 2),
            uniform(&[c_in], 2.8, 3.2, seed + 3),
            uniform(&[bottleneck], 0.3, 0.5, seed + 4),
            uniform(&[bottleneck], 2.8, 3.2, seed + 5),
            random(&[bottleneck, 3, 3], seed + 6),
            random(&[growth, bottleneck], seed + 7),
        ];
        assert_grads("block", op, args, &[0, 1, 2, 3, 4, 5, 6, 7], seed);
    }
}

#[test]
fn single_precision_gradients_track_double() {
    use condensenext_core::gradcheck::analytic_gradient;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let check = Check {
            op: Op::Block {
                mask: Arc::new(random_mask(&mut rng, 4, 4)),
                depthwise: ConvConfig::depthwise(8, 3, 1),
                pointwise: ConvConfig::pointwise(8, 4),
            },
            args: vec![
                random(&[2, 4, 4, 4], seed),
                random(&[8, 4], seed + 1),
                uniform(&[4], 0.3, 0.5, seed + 2),
                uniform(&[4], 2.8, 3.2, seed + 3),
                uniform(&[8], 0.3, 0.5, seed + 4),
                uniform(&[8], 2.8, 3.2, seed + 5),
                random(&[8, 3, 3], seed + 6),
                random(&[4, 8], seed + 7),
            ],
            wrt: 0,
            coeff_seed: seed,
        };
        let g32 = analytic_gradient(&check, check.point()).unwrap();
        let g64 = analytic_gradient(&check, &check.point().cast::<f64>()).unwrap();
        let scale = g64.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = g32.iter().zip(&g64).map(|(a, b)| (f64::from(*a) - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-4 * scale, "seed {seed}: {err:e} vs scale {scale:e}");
    }
}
