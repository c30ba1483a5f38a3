use crate::error::{Error, Result};
use crate::param::Param;

/// One Nesterov update on flat slices:
/// `g' = g + wd·w; v ← m·v + g'; w ← w − lr·(g' + m·v)`.
/// Entries with `mask[i] == false` are held at zero, velocity included.
pub fn nesterov_update(
    w: &mut [f32],
    g: &[f32],
    v: &mut [f32],
    mask: Option<&[bool]>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for i in 0..w.len() {
        if mask.is_some_and(|m| !m[i]) {
            w[i] = 0.0;
            v[i] = 0.0;
            continue;
        }
        let wi = f64::from(w[i]);
        let gi = f64::from(g[i]) + weight_decay * wi;
        let vi = momentum * f64::from(v[i]) + gi;
        v[i] = vi as f32;
        w[i] = (wi - lr * (gi + momentum * vi)) as f32;
    }
}

/// SGD with Nesterov momentum; velocity buffers start at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn velocities(&self) -> &[Vec<f32>] {
        &self.velocity
    }

    pub fn set_velocities(&mut self, velocity: Vec<Vec<f32>>) {
        self.velocity = velocity;
    }

    /// Updates `params` in place. A missing gradient counts as zero, so momentum still coasts.
    pub fn step(&mut self, params: &mut [&mut Param], grads: &[Option<Vec<f32>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::contract("parameter set changed between optimizer steps"));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let zeros;
            let g = match g {
                Some(g) => g.as_slice(),
                None => {
                    zeros = vec![0.0; p.len()];
                    &zeros
                }
            };
            if g.len() != p.len() || v.len() != p.len() {
                return Err(Error::shape(format!("gradient size mismatch for `{}`", p.name)));
            }
            let mask = p.mask.clone();
            nesterov_update(
                p.value.data_mut(),
                g,
                v,
                mask.as_deref(),
                lr,
                self.momentum,
                self.weight_decay,
            );
        }
        Ok(())
    }
}

/// Functional form over a parameter set with explicit velocity buffers.
pub fn sgd_nesterov_step(
    params: &mut [&mut Param],
    grads: &[Option<Vec<f32>>],
    velocity: &mut Vec<Vec<f32>>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let mut opt = Sgd {
        momentum,
        weight_decay,
        velocity: std::mem::take(velocity),
    };
    let r = opt.step(params, grads, lr);
    *velocity = opt.velocity;
    r
}
