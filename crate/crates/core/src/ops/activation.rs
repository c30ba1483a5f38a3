use crate::tape::{Backward, BackwardCtx, Tape, Var};
use crate::tensor::{Real, Tensor};

/// Upper clip of [`relu6`].
pub const RELU6_CAP: f64 = 6.0;

/// `min(max(0, x), 6)`. NaN passes through unchanged.
#[inline]
pub fn relu6_scalar<T: Real>(x: T) -> T {
    let cap = T::lit(RELU6_CAP);
    if x <= T::zero() {
        T::zero()
    } else if x >= cap {
        cap
    } else {
        x
    }
}

/// Derivative of ReLU6 expressed through its output: 1 on the open interval (0, 6).
#[inline]
pub(crate) fn relu6_passes<T: Real>(y: T) -> bool {
    y > T::zero() && y < T::lit(RELU6_CAP)
}

pub fn relu6<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(relu6_scalar)
}

struct Relu6Rule;

impl<T: Real> Backward<T> for Relu6Rule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let g = ctx
            .output
            .data()
            .iter()
            .zip(ctx.grad)
            .map(|(&y, &g)| if relu6_passes(y) { g } else { T::zero() })
            .collect();
        vec![Some(g)]
    }
}

impl<T: Real> Tape<T> {
    pub fn relu6(&mut self, x: Var) -> Var {
        let out = relu6(self.value(x));
        self.record(out, vec![x], Box::new(Relu6Rule))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clips_to_zero_and_six() {
        let x = Tensor::<f32>::from_vec(&[3], vec![-3.0, 2.5, 7.0]).unwrap();
        assert_eq!(relu6(&x).data(), &[0.0, 2.5, 6.0]);
        assert_eq!(relu6_scalar(0.0f32), 0.0);
        assert_eq!(relu6_scalar(6.0f32), 6.0);
        assert_eq!(relu6_scalar(f32::INFINITY), 6.0);
        assert_eq!(relu6_scalar(f32::NEG_INFINITY), 0.0);
        assert!(relu6_scalar(f32::NAN).is_nan());
    }

    #[test]
    fn piecewise_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.variable(Tensor::from_vec(&[3], vec![3.0, -1.0, 9.0]).unwrap());
        let y = tape.relu6(x);
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 0.0, 0.0]);
    }
}
