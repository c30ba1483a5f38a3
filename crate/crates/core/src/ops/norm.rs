//! Per-channel batch normalization, optionally fused with ReLU6.

use crate::error::{Error, Result};
use crate::ops::activation::{relu6_passes, relu6_scalar};
use crate::ops::conv::image_dims;
use crate::tape::{Backward, BackwardCtx, Tape, Var};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics, updated by exponential moving average in training mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `running ← (1 − momentum)·running + momentum·batch`; the batch variance is
    /// the unbiased estimate.
    pub fn update(&mut self, batch: &BatchStats) {
        let m = BN_MOMENTUM;
        for c in 0..self.mean.len() {
            self.mean[c] = ((1.0 - m) * f64::from(self.mean[c]) + m * batch.mean[c]) as f32;
            self.var[c] = ((1.0 - m) * f64::from(self.var[c]) + m * batch.unbiased_var[c]) as f32;
        }
    }
}

/// Statistics of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub unbiased_var: Vec<f64>,
}

/// How normalization statistics are obtained.
#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a> {
    Train,
    Eval(&'a RunningStats),
}

fn channel_stats<T: Real>(x: &Tensor<T>) -> Result<BatchStats> {
    let (n, c, h, w) = image_dims(x.shape())?;
    let plane = h * w;
    let count = n * plane;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ch in 0..c {
        if count < 2 {
            return Err(Error::DegenerateVariance { channel: ch });
        }
        let mut s = 0.0;
        for b in 0..n {
            s += x.data()[(b * c + ch) * plane..][..plane]
                .iter()
                .map(|v| v.to_f64().unwrap_or(f64::NAN))
                .sum::<f64>();
        }
        let mu = s / count as f64;
        let mut ss = 0.0;
        for b in 0..n {
            ss += x.data()[(b * c + ch) * plane..][..plane]
                .iter()
                .map(|v| {
                    let d = v.to_f64().unwrap_or(f64::NAN) - mu;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = ss / count as f64;
    }
    let unbiased_var = var
        .iter()
        .map(|v| v * count as f64 / (count - 1) as f64)
        .collect();
    Ok(BatchStats {
        mean,
        var,
        unbiased_var,
    })
}

struct Prepared<T> {
    mean: Vec<T>,
    invstd: Vec<T>,
    stats: Option<BatchStats>,
}

fn prepare<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, mode: NormMode<'_>) -> Result<Prepared<T>> {
    let (_, c, _, _) = image_dims(x.shape())?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(format!(
            "batch norm over {c} channels given {} scales and {} shifts",
            gamma.len(),
            beta.len()
        )));
    }
    let inv = |v: f64| T::lit(1.0 / (v + BN_EPS).sqrt());
    match mode {
        NormMode::Train => {
            let stats = channel_stats(x)?;
            Ok(Prepared {
                mean: stats.mean.iter().map(|&m| T::lit(m)).collect(),
                invstd: stats.var.iter().map(|&v| inv(v)).collect(),
                stats: Some(stats),
            })
        }
        NormMode::Eval(running) => {
            if running.channels() != c {
                return Err(Error::shape(format!(
                    "running statistics for {} channels, input has {c}",
                    running.channels()
                )));
            }
            Ok(Prepared {
                mean: running.mean.iter().map(|&m| T::lit(f64::from(m))).collect(),
                invstd: running.var.iter().map(|&v| inv(f64::from(v))).collect(),
                stats: None,
            })
        }
    }
}

fn normalize<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T], p: &Prepared<T>, relu6: bool) -> Tensor<T> {
    let (n, c) = (x.dim(0), x.dim(1));
    let plane = x.dim(2) * x.dim(3);
    let mut out = Vec::with_capacity(x.len());
    for b in 0..n {
        for ch in 0..c {
            let scale = gamma[ch] * p.invstd[ch];
            let shift = beta[ch] - p.mean[ch] * scale;
            let src = &x.data()[(b * c + ch) * plane..][..plane];
            if relu6 {
                out.extend(src.iter().map(|&v| relu6_scalar(v * scale + shift)));
            } else {
                out.extend(src.iter().map(|&v| v * scale + shift));
            }
        }
    }
    Tensor::from_vec(x.shape(), out).expect("same shape")
}

/// Normalizes `x` with batch or running statistics. In training mode the
/// running statistics are updated.
pub fn batch_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &mut RunningStats,
    training: bool,
) -> Result<Tensor<T>> {
    let p = if training {
        prepare(x, gamma, beta, NormMode::Train)?
    } else {
        prepare(x, gamma, beta, NormMode::Eval(running))?
    };
    let y = normalize(x, gamma.data(), beta.data(), &p, false);
    if let Some(stats) = &p.stats {
        running.update(stats);
    }
    Ok(y)
}

struct NormRule<T> {
    mean: Vec<T>,
    invstd: Vec<T>,
    batch_stats: bool,
    relu6: bool,
}

impl<T: Real> Backward<T> for NormRule<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (x, gamma) = (ctx.inputs[0], ctx.inputs[1]);
        let (n, c) = (x.dim(0), x.dim(1));
        let plane = x.dim(2) * x.dim(3);
        let count = T::lit((n * plane) as f64);
        let (xs, out, gs) = (x.data(), ctx.output.data(), ctx.grad);
        // Upstream gradient with the fused clamp applied.
        let g_at = |i: usize| if !self.relu6 || relu6_passes(out[i]) { gs[i] } else { T::zero() };

        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let mu = self.mean[ch];
                let (mut sg, mut sgx) = (T::zero(), T::zero());
                for (i, &xv) in (base..base + plane).zip(&xs[base..base + plane]) {
                    let g = g_at(i);
                    sg += g;
                    sgx += g * (xv - mu);
                }
                dbeta[ch] += sg;
                dgamma[ch] += sgx * self.invstd[ch];
            }
        }

        let dx = ctx.needs[0].then(|| {
            let mut dx = vec![T::zero(); x.len()];
            for ch in 0..c {
                let (mu, is) = (self.mean[ch], self.invstd[ch]);
                let k = gamma.data()[ch] * is;
                // dx = k·g + a·(x − mu) + b, with a and b zero outside batch statistics.
                let (a, b0) = if self.batch_stats {
                    (-k * is * dgamma[ch] / count, -k * dbeta[ch] / count)
                } else {
                    (T::zero(), T::zero())
                };
                for b in 0..n {
                    let base = (b * c + ch) * plane;
                    for (i, (d, &xv)) in (base..base + plane).zip(dx[base..base + plane].iter_mut().zip(&xs[base..base + plane])) {
                        *d = k * g_at(i) + a * (xv - mu) + b0;
                    }
                }
            }
            dx
        });
        vec![dx, ctx.needs[1].then_some(dgamma), ctx.needs[2].then_some(dbeta)]
    }
}

impl<T: Real> Tape<T> {
    /// Batch normalization; returns the batch statistics in training mode so the
    /// caller can update its running averages.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: NormMode<'_>) -> Result<(Var, Option<BatchStats>)> {
        self.norm_impl(x, gamma, beta, mode, false)
    }

    /// `relu6(batch_norm(x))` as one node.
    pub fn batch_norm_relu6(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        self.norm_impl(x, gamma, beta, mode, true)
    }

    fn norm_impl(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_>,
        relu6: bool,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (xt, gt, bt) = (self.value(x), self.value(gamma), self.value(beta));
        let p = prepare(xt, gt, bt, mode)?;
        let out = normalize(xt, gt.data(), bt.data(), &p, relu6);
        let rule = NormRule {
            mean: p.mean,
            invstd: p.invstd,
            batch_stats: p.stats.is_some(),
            relu6,
        };
        let v = self.record(out, vec![x, gamma, beta], Box::new(rule));
        Ok((v, p.stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    fn affine(c: usize, g: f64, b: f64) -> (Tensor<f64>, Tensor<f64>) {
        (
            Tensor::new(&[c], Fill::Constant(g)).unwrap(),
            Tensor::new(&[c], Fill::Constant(b)).unwrap(),
        )
    }

    #[test]
    fn eval_with_identity_statistics_is_identity() {
        let x = Tensor::<f64>::new(&[2, 3, 4, 4], Fill::Normal { mean: 0.0, std: 2.0, seed: 1 }).unwrap();
        let (g, b) = affine(3, 1.0, 0.0);
        let mut rs = RunningStats::new(3);
        let y = batch_norm(&x, &g, &b, &mut rs, false).unwrap();
        let s = 1.0 / (1.0 + BN_EPS).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * s).abs() < 1e-12);
            assert!((a - b).abs() < 1e-4 * b.abs().max(1.0));
        }
    }

    #[test]
    fn training_output_is_standardized() {
        let x = Tensor::<f64>::new(&[4, 2, 3, 3], Fill::Normal { mean: 3.0, std: 5.0, seed: 2 }).unwrap();
        let (g, b) = affine(2, 1.0, 0.0);
        let mut rs = RunningStats::new(2);
        let y = batch_norm(&x, &g, &b, &mut rs, true).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| y.data()[(n * 2 + ch) * 9..][..9].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-4);
            assert!((var - 1.0).abs() < 1e-4);
        }
        // running stats moved 10% toward the batch statistics
        assert!(rs.mean.iter().all(|&m| m > 0.0 && m < 1.0));
    }

    #[test]
    fn constant_channel_maps_to_shift() {
        let x = Tensor::<f64>::new(&[2, 1, 2, 2], Fill::Constant(4.2)).unwrap();
        let (g, b) = affine(1, 2.0, 0.75);
        let mut rs = RunningStats::new(1);
        let y = batch_norm(&x, &g, &b, &mut rs, true).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.75).abs() < 1e-12));
    }

    #[test]
    fn degenerate_batch_is_rejected() {
        let x = Tensor::<f64>::new(&[1, 2, 1, 1], Fill::Constant(1.0)).unwrap();
        let (g, b) = affine(2, 1.0, 0.0);
        let mut rs = RunningStats::new(2);
        assert!(matches!(
            batch_norm(&x, &g, &b, &mut rs, true),
            Err(Error::DegenerateVariance { .. })
        ));
        assert!(batch_norm(&x, &g, &b, &mut rs, false).is_ok());
    }

    #[test]
    fn channel_mismatch() {
        let x = Tensor::<f64>::new(&[2, 2, 2, 2], Fill::Constant(1.0)).unwrap();
        let (g, b) = affine(3, 1.0, 0.0);
        assert!(matches!(
            batch_norm(&x, &g, &b, &mut RunningStats::new(3), true),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn fused_matches_composition() {
        let x = Tensor::<f64>::new(&[3, 2, 3, 3], Fill::Normal { mean: 1.0, std: 3.0, seed: 4 }).unwrap();
        let g = Tensor::from_vec(&[2], vec![2.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![1.0, 2.5]).unwrap();
        let mut tape = Tape::<f64>::new();
        let (xv, gv, bv) = (tape.variable(x), tape.variable(g), tape.variable(b));
        let (fused, _) = tape.batch_norm_relu6(xv, gv, bv, NormMode::Train).unwrap();
        let (bn, _) = tape.batch_norm(xv, gv, bv, NormMode::Train).unwrap();
        let composed = tape.relu6(bn);
        assert_eq!(tape.value(fused), tape.value(composed));
    }
}
