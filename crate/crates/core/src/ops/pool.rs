use crate::error::{Error, Result};
use crate::ops::conv::image_dims;
use crate::tape::{Backward, BackwardCtx, Tape, Var};
use crate::tensor::{Real, Tensor};

fn pooled_extent(d: usize, window: usize, stride: usize) -> Result<usize> {
    if window == 0 || stride == 0 {
        return Err(Error::param("pooling window and stride must be positive"));
    }
    if window > d {
        return Err(Error::shape(format!("pooling window {window} exceeds extent {d}")));
    }
    Ok((d - window) / stride + 1)
}

/// Average pooling without padding.
pub fn avg_pool<T: Real>(x: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = image_dims(x.shape())?;
    let (oh, ow) = (pooled_extent(h, window, stride)?, pooled_extent(w, window, stride)?);
    let scale = T::lit(1.0 / (window * window) as f64);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks_exact(h * w) {
        for r in 0..oh {
            for cc in 0..ow {
                let mut acc = T::zero();
                for u in 0..window {
                    let row = &plane[(r * stride + u) * w..];
                    for v in 0..window {
                        acc += row[cc * stride + v];
                    }
                }
                out.push(acc * scale);
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

/// Mean over each spatial plane; `(N, C, H, W) → (N, C)`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = image_dims(x.shape())?;
    let scale = T::lit(1.0 / (h * w) as f64);
    let out = x
        .data()
        .chunks_exact(h * w)
        .map(|p| p.iter().copied().sum::<T>() * scale)
        .collect();
    Tensor::from_vec(&[n, c], out)
}

struct AvgPoolRule {
    window: usize,
    stride: usize,
}

impl<T: Real> Backward<T> for AvgPoolRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let x = ctx.inputs[0];
        let (h, w) = (x.dim(2), x.dim(3));
        let (oh, ow) = (ctx.output.dim(2), ctx.output.dim(3));
        let scale = T::lit(1.0 / (self.window * self.window) as f64);
        let mut dx = vec![T::zero(); x.len()];
        for (dplane, gplane) in dx.chunks_exact_mut(h * w).zip(ctx.grad.chunks_exact(oh * ow)) {
            for r in 0..oh {
                for cc in 0..ow {
                    let g = gplane[r * ow + cc] * scale;
                    for u in 0..self.window {
                        for v in 0..self.window {
                            dplane[(r * self.stride + u) * w + cc * self.stride + v] += g;
                        }
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

struct GlobalPoolRule;

impl<T: Real> Backward<T> for GlobalPoolRule {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let x = ctx.inputs[0];
        let plane = x.dim(2) * x.dim(3);
        let scale = T::lit(1.0 / plane as f64);
        let dx = ctx
            .grad
            .iter()
            .flat_map(|&g| std::iter::repeat_n(g * scale, plane))
            .collect();
        vec![Some(dx)]
    }
}

impl<T: Real> Tape<T> {
    pub fn avg_pool(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let out = avg_pool(self.value(x), window, stride)?;
        Ok(self.record(out, vec![x], Box::new(AvgPoolRule { window, stride })))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = global_avg_pool(self.value(x))?;
        Ok(self.record(out, vec![x], Box::new(GlobalPoolRule)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    #[test]
    fn global_pool_of_constant() {
        let x = Tensor::<f32>::new(&[2, 3, 4, 4], Fill::Constant(5.0)).unwrap();
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn avg_pool_halves_extent() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let y = avg_pool(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.data(), &[3.5, 5.5]);
        assert!(avg_pool(&x, 3, 1).is_err());
    }
}
