//! Classifier head: linear map, dropout and log-softmax over `(N, F)` tensors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Backward, BackwardCtx, Tape, Var};
use crate::tensor::{matmul, Real, Tensor};

fn matrix_dims(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [n, f] => Ok((*n, *f)),
        _ => Err(Error::shape(format!("{what} expects (batch, features), got {shape:?}"))),
    }
}

/// `y = x·Wᵀ + b` with `x (N, F)`, `W (O, F)`, `b (O)`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, f) = matrix_dims(x.shape(), "linear")?;
    let (o, wf) = matrix_dims(w.shape(), "linear weight")?;
    if wf != f {
        return Err(Error::shape(format!("linear weight takes {wf} features, input has {f}")));
    }
    if b.len() != o {
        return Err(Error::shape(format!("linear bias has {} entries for {o} outputs", b.len())));
    }
    let mut out: Vec<T> = (0..n).flat_map(|_| b.data().iter().copied()).collect();
    matmul(n, f, o, x.data(), false, w.data(), true, &mut out, true);
    Tensor::from_vec(&[n, o], out)
}

struct LinearRule;

impl<T: Real> Backward<T> for LinearRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let (n, f) = (x.dim(0), x.dim(1));
        let o = w.dim(0);
        let dx = ctx.needs[0].then(|| {
            let mut dx = vec![T::zero(); n * f];
            matmul(n, o, f, ctx.grad, false, w.data(), false, &mut dx, false);
            dx
        });
        let dw = ctx.needs[1].then(|| {
            let mut dw = vec![T::zero(); o * f];
            matmul(o, n, f, ctx.grad, true, x.data(), false, &mut dw, false);
            dw
        });
        let db = ctx.needs[2].then(|| {
            let mut db = vec![T::zero(); o];
            for row in ctx.grad.chunks_exact(o) {
                db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
            }
            db
        });
        vec![dx, dw, db]
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::param(format!("dropout rate {rate} outside [0, 1)")))
    }
}

/// Per-element multipliers: `0` for dropped units, `1/(1−rate)` for kept ones.
fn dropout_scales<T: Real>(len: usize, rate: f64, seed: u64) -> Vec<T> {
    let keep = T::lit(1.0 / (1.0 - rate));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

/// Inverted dropout. Identity in eval mode or at rate 0.
pub fn dropout<T: Real>(x: &Tensor<T>, rate: f64, training: bool, seed: u64) -> Result<Tensor<T>> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let scales = dropout_scales::<T>(x.len(), rate, seed);
    let data = x.data().iter().zip(&scales).map(|(&v, &s)| v * s).collect();
    Tensor::from_vec(x.shape(), data)
}

struct DropoutRule<T> {
    scales: Vec<T>,
}

impl<T: Real> Backward<T> for DropoutRule<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(ctx.grad.iter().zip(&self.scales).map(|(&g, &s)| g * s).collect())]
    }
}

/// Row-wise `x − max − ln Σ exp(x − max)`.
pub fn log_softmax<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = matrix_dims(x.shape(), "log_softmax")?;
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        out.extend(row.iter().map(|&v| v - lse));
    }
    Tensor::from_vec(x.shape(), out)
}

pub fn softmax<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(log_softmax(x)?.map(T::exp))
}

struct LogSoftmaxRule;

impl<T: Real> Backward<T> for LogSoftmaxRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let c = ctx.output.dim(1);
        let mut dx = Vec::with_capacity(ctx.grad.len());
        for (y, g) in ctx.output.data().chunks_exact(c).zip(ctx.grad.chunks_exact(c)) {
            let gsum = g.iter().copied().sum::<T>();
            dx.extend(y.iter().zip(g).map(|(&y, &g)| g - y.exp() * gsum));
        }
        vec![Some(dx)]
    }
}

impl<T: Real> Tape<T> {
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.record(out, vec![x, w, b], Box::new(LinearRule)))
    }

    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, seed: u64) -> Result<Var> {
        check_rate(rate)?;
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let scales = dropout_scales::<T>(self.value(x).len(), rate, seed);
        let src = self.value(x);
        let data = src.data().iter().zip(&scales).map(|(&v, &s)| v * s).collect();
        let out = Tensor::from_vec(src.shape(), data)?;
        Ok(self.record(out, vec![x], Box::new(DropoutRule { scales })))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let out = log_softmax(self.value(x))?;
        Ok(self.record(out, vec![x], Box::new(LogSoftmaxRule)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    #[test]
    fn log_softmax_of_zeros() {
        let x = Tensor::<f64>::zeros(&[1, 2]).unwrap();
        let y = log_softmax(&x).unwrap();
        for v in y.data() {
            assert!((v + std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn log_softmax_is_stable_for_large_logits() {
        let x = Tensor::<f32>::from_vec(&[1, 3], vec![1000.0, 0.0, -1000.0]).unwrap();
        let y = log_softmax(&x).unwrap();
        assert!(y.all_finite());
        assert!(y.data()[0].abs() < 1e-6);
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let x = Tensor::<f32>::new(&[4, 5], Fill::Normal { mean: 0.0, std: 1.0, seed: 1 }).unwrap();
        assert_eq!(dropout(&x, 0.0, true, 3).unwrap(), x);
        assert_eq!(dropout(&x, 0.5, false, 3).unwrap(), x);
    }

    #[test]
    fn dropout_scales_survivors() {
        let x = Tensor::<f64>::new(&[1000], Fill::Constant(1.0)).unwrap();
        let y = dropout(&x, 0.25, true, 9).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-12));
        let dropped = y.data().iter().filter(|&&v| v == 0.0).count();
        assert!((150..350).contains(&dropped));
        assert_eq!(y, dropout(&x, 0.25, true, 9).unwrap());
    }

    #[test]
    fn dropout_rejects_bad_rates() {
        let x = Tensor::<f32>::zeros(&[2]).unwrap();
        assert!(matches!(dropout(&x, 1.0, true, 0), Err(Error::Parameter(_))));
        assert!(matches!(dropout(&x, -0.1, true, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn linear_matches_hand_evaluation() {
        let x = Tensor::<f64>::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_vec(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[3], vec![0.5, -0.5, 0.0]).unwrap();
        assert_eq!(linear(&x, &w, &b).unwrap().data(), &[1.5, 1.5, 3.0]);
        let bad = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        assert!(linear(&x, &w, &bad).is_err());
    }
}
