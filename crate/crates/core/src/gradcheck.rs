//! Central finite-difference checks of tape gradients.
//!
//! Both the analytic gradient and the difference quotient are computed on
//! `f64` tapes. The kernels are generic, so this exercises the same code as
//! training while keeping single-precision rounding out of the comparison.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// A scalar-valued function of one tensor, evaluable at any precision.
pub trait Objective {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
}

/// Below this magnitude gradients are compared in absolute terms; a
/// difference quotient cannot resolve an exactly-zero gradient any better.
pub const ZERO_FLOOR: f64 = 1e-5;

/// `|a − d| / max(|a|, |d|, ZERO_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(ZERO_FLOOR);
    (analytic - numeric).abs() / scale
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub relative_errors: Vec<f64>,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckReport {
    /// Index and value of the worst element.
    pub fn worst(&self) -> Option<(usize, f64)> {
        self.relative_errors
            .iter()
            .copied()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

pub fn analytic_gradient<T: Real, F: Objective>(f: &F, x: &Tensor<T>) -> Result<Vec<T>> {
    let mut tape = Tape::<T>::new();
    let xv = tape.variable(x.clone());
    let loss = f.eval(&mut tape, xv)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::contract("objective must return a scalar"));
    }
    let grads = tape.into_gradients(loss)?;
    Ok(grads
        .get(xv)
        .map(<[T]>::to_vec)
        .unwrap_or_else(|| vec![T::zero(); x.len()]))
}

pub fn eval_f64<F: Objective>(f: &F, x: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let out = f.eval(&mut tape, xv)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::contract("objective must return a scalar"));
    }
    Ok(v.data()[0])
}

pub fn finite_diff_check<F: Objective>(
    f: &F,
    x: &Tensor<f32>,
    step: f64,
    tol: f64,
) -> Result<CheckReport> {
    if !(step > 0.0) {
        return Err(Error::param("finite-difference step must be positive"));
    }
    let base = x.cast::<f64>();
    let analytic = analytic_gradient(f, &base)?;

    let mut probe = base.clone();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let x0 = base.data()[i];
        probe.data_mut()[i] = x0 + step;
        let up = eval_f64(f, &probe)?;
        probe.data_mut()[i] = x0 - step;
        let down = eval_f64(f, &probe)?;
        probe.data_mut()[i] = x0;
        numeric.push((up - down) / (2.0 * step));
    }

    let relative_errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &d)| relative_error(a, d))
        .collect();
    let max_relative_error = relative_errors.iter().copied().fold(0.0, f64::max);
    Ok(CheckReport {
        analytic,
        numeric,
        relative_errors,
        max_relative_error,
        tolerance: tol,
        passed: max_relative_error <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    struct SumOfSquares;

    impl Objective for SumOfSquares {
        fn eval<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
            let sq = tape.mul(x, x)?;
            Ok(tape.sum(sq))
        }
    }

    struct Constant;

    impl Objective for Constant {
        fn eval<T: Real>(&self, tape: &mut Tape<T>, _x: Var) -> Result<Var> {
            Ok(tape.constant(Tensor::scalar(T::lit(3.5))))
        }
    }

    struct Identity;

    impl Objective for Identity {
        fn eval<T: Real>(&self, _tape: &mut Tape<T>, x: Var) -> Result<Var> {
            Ok(x)
        }
    }

    #[test]
    fn sum_of_squares_passes_tight_tolerance() {
        for seed in 0..5 {
            let x = Tensor::<f32>::new(
                &[3],
                Fill::Uniform {
                    low: -2.0,
                    high: 2.0,
                    seed,
                },
            )
            .unwrap();
            let r = finite_diff_check(&SumOfSquares, &x, 1e-3, 1e-4).unwrap();
            assert!(r.passed, "{r:?}");
            for (a, xi) in r.analytic.iter().zip(x.data()) {
                assert!((a - 2.0 * f64::from(*xi)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_objective_has_zero_error() {
        let x = Tensor::<f32>::new(&[4], Fill::Constant(1.0)).unwrap();
        let r = finite_diff_check(&Constant, &x, 1e-3, 1e-9).unwrap();
        assert_eq!(r.max_relative_error, 0.0);
        assert!(r.passed);
    }

    #[test]
    fn non_scalar_objective_is_rejected() {
        let x = Tensor::<f32>::new(&[4], Fill::Constant(1.0)).unwrap();
        assert!(matches!(
            finite_diff_check(&Identity, &x, 1e-3, 1e-3),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.001) - 0.001 / 1.001).abs() < 1e-12);
    }
}
