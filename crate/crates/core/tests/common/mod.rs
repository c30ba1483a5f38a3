//! Reference implementations shared by the integration tests. Nothing here
//! calls into the library's kernels; the oracles are plain nested loops.
#![allow(dead_code)]

use std::sync::Arc;

use condensenext_core::gradcheck::Objective;
use condensenext_core::ops::{ConvConfig, ConvMode, GroupMask, NormMode};
use condensenext_core::train::{ClassCounts, LossKind};
use condensenext_core::{Fill, Real, Result, Tape, Tensor, Var};

pub fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::new(shape, Fill::Normal { mean: 0.0, std: 1.0, seed }).unwrap()
}

pub fn uniform(shape: &[usize], low: f64, high: f64, seed: u64) -> Tensor<f32> {
    Tensor::new(shape, Fill::Uniform { low, high, seed }).unwrap()
}

/// Direct evaluation of a (possibly grouped) convolution in f64, counting
/// every multiplication it performs.
///
/// Standard and grouped weights are `(O, I/G, k, k)`, depthwise `(C, k, k)`,
/// pointwise `(O, I)`; all are read through the same `(O, I/G, k, k)` view.
pub fn direct_conv(x: &Tensor<f32>, w: &Tensor<f32>, cfg: &ConvConfig) -> (Vec<f64>, Vec<usize>, u64) {
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (k, s, p, g) = (cfg.kernel_size, cfg.stride, cfg.padding, cfg.groups);
    let o = cfg.out_channels;
    let (ci, co) = (c / g, o / g);
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (wd + 2 * p - k) / s + 1;
    let mut out = vec![0.0f64; n * o * oh * ow];
    let mut mults = 0u64;
    for b in 0..n {
        for oc in 0..o {
            let grp = oc / co;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0f64;
                    for j in 0..ci {
                        let ic = grp * ci + j;
                        for u in 0..k {
                            for v in 0..k {
                                let iy = (y * s + u) as isize - p as isize;
                                let ix = (xx * s + v) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((b * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * ci + j) * k + u) * k + v];
                                acc += f64::from(xv) * f64::from(wv);
                                mults += 1;
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    (out, vec![n, o, oh, ow], mults)
}

/// Multiplications a padding-free layer performs, as the closed form counts them.
pub fn closed_form_macs(cfg: &ConvConfig, out_extent: usize) -> u64 {
    let (k, i, o, g) = (cfg.kernel_size as u64, cfg.in_channels as u64, cfg.out_channels as u64, cfg.groups as u64);
    let d2 = (out_extent * out_extent) as u64;
    match cfg.mode {
        ConvMode::Depthwise => k * k * i * d2,
        ConvMode::Pointwise => i * o * d2,
        _ => k * k * (i / g) * o * d2,
    }
}

/// Grouped weight `(O, I/G, k, k)` embedded into a dense `(O, I, k, k)` one.
pub fn block_diagonal(w: &Tensor<f32>, cfg: &ConvConfig) -> Tensor<f32> {
    let (o, i, g, k) = (cfg.out_channels, cfg.in_channels, cfg.groups, cfg.kernel_size);
    let (ci, co) = (i / g, o / g);
    let mut dense = vec![0.0f32; o * i * k * k];
    for oc in 0..o {
        let grp = oc / co;
        for j in 0..ci {
            for t in 0..k * k {
                dense[(oc * i + grp * ci + j) * k * k + t] = w.data()[(oc * ci + j) * k * k + t];
            }
        }
    }
    Tensor::from_vec(&[o, i, k, k], dense).unwrap()
}

/// Dense `(O, I)` weight of a learned group conv with pruned entries zeroed.
pub fn masked_dense(w: &Tensor<f32>, mask: &GroupMask) -> Tensor<f32> {
    let (o, i) = (w.dim(0), w.dim(1));
    let mut d = w.clone();
    for oc in 0..o {
        let kept = &mask.kept[oc % mask.groups];
        for ic in 0..i {
            if !kept.contains(&ic) {
                d.data_mut()[oc * i + ic] = 0.0;
            }
        }
    }
    d
}

/// Channel slice `[from, to)` of an NCHW tensor.
pub fn slice_channels(x: &Tensor<f32>, from: usize, to: usize) -> Tensor<f32> {
    let (n, c, plane) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
    let mut out = Vec::new();
    for b in 0..n {
        out.extend_from_slice(&x.data()[(b * c + from) * plane..(b * c + to) * plane]);
    }
    Tensor::from_vec(&[n, to - from, x.dim(2), x.dim(3)], out).unwrap()
}

/// Channel concatenation without the library.
pub fn concat_channels(parts: &[Tensor<f32>]) -> Tensor<f32> {
    let n = parts[0].dim(0);
    let plane = parts[0].dim(2) * parts[0].dim(3);
    let c: usize = parts.iter().map(|t| t.dim(1)).sum();
    let mut out = Vec::new();
    for b in 0..n {
        for t in parts {
            let tc = t.dim(1);
            out.extend_from_slice(&t.data()[b * tc * plane..(b + 1) * tc * plane]);
        }
    }
    Tensor::from_vec(&[n, c, parts[0].dim(2), parts[0].dim(3)], out).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - f64::from(*y)).abs()).fold(0.0, f64::max)
}

/// One differentiable operation (or composition) for gradient checking.
#[derive(Clone)]
pub enum Op {
    Conv(ConvConfig),
    Lgc(Arc<GroupMask>),
    BatchNorm,
    BatchNormRelu6,
    Relu6,
    AvgPool(usize),
    GlobalAvgPool,
    Linear,
    LogSoftmax,
    Concat,
    Dropout { rate: f64, seed: u64 },
    Loss { kind: LossKind, labels: Vec<usize>, counts: ClassCounts },
    /// BN-ReLU6 → LGC → BN-ReLU6 → depthwise 3×3 → pointwise.
    /// Arguments: x, lgc weight, γ1, β1, γ2, β2, depthwise weight, pointwise weight.
    Block { mask: Arc<GroupMask>, depthwise: ConvConfig, pointwise: ConvConfig },
}

impl Op {
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, a: &[Var]) -> Result<Var> {
        Ok(match self {
            Op::Conv(cfg) => tape.conv2d(a[0], a[1], cfg)?,
            Op::Lgc(m) => tape.learned_group_conv(a[0], a[1], m.clone())?,
            Op::BatchNorm => tape.batch_norm(a[0], a[1], a[2], NormMode::Train)?.0,
            Op::BatchNormRelu6 => tape.batch_norm_relu6(a[0], a[1], a[2], NormMode::Train)?.0,
            Op::Relu6 => tape.relu6(a[0]),
            Op::AvgPool(k) => tape.avg_pool(a[0], *k, *k)?,
            Op::GlobalAvgPool => tape.global_avg_pool(a[0])?,
            Op::Linear => tape.linear(a[0], a[1], a[2])?,
            Op::LogSoftmax => tape.log_softmax(a[0])?,
            Op::Concat => tape.concat_channels(&[a[0], a[1]])?,
            Op::Dropout { rate, seed } => tape.dropout(a[0], *rate, true, *seed)?,
            Op::Loss { kind, labels, counts } => tape.loss(*kind, a[0], labels, counts)?,
            Op::Block { mask, depthwise, pointwise } => {
                let h = tape.batch_norm_relu6(a[0], a[2], a[3], NormMode::Train)?.0;
                let h = tape.learned_group_conv(h, a[1], mask.clone())?;
                let h = tape.batch_norm_relu6(h, a[4], a[5], NormMode::Train)?.0;
                let h = tape.conv2d(h, a[6], depthwise)?;
                tape.conv2d(h, a[7], pointwise)?
            }
        })
    }
}

/// `Σ r ⊙ op(args)` as a function of argument `wrt`, with fixed random weights `r`
/// so that no gradient is accidentally symmetric.
pub struct Check {
    pub op: Op,
    pub args: Vec<Tensor<f32>>,
    pub wrt: usize,
    pub coeff_seed: u64,
}

impl Objective for Check {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let vars: Vec<Var> = self
            .args
            .iter()
            .enumerate()
            .map(|(i, t)| if i == self.wrt { x } else { tape.constant(t.cast::<T>()) })
            .collect();
        let y = self.op.apply(tape, &vars)?;
        let shape = tape.shape(y).to_vec();
        let r = Tensor::<f64>::new(&shape, Fill::Uniform { low: 0.5, high: 1.5, seed: self.coeff_seed })?.cast::<T>();
        let r = tape.constant(r);
        let weighted = tape.mul(y, r)?;
        Ok(tape.sum(weighted))
    }
}

impl Check {
    pub fn point(&self) -> &Tensor<f32> {
        &self.args[self.wrt]
    }
}
