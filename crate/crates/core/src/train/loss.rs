//! Classification losses as scalar tape ops. Each returns the batch mean.

use crate::error::{Error, Result};
use crate::tape::{Backward, BackwardCtx, Tape, Var};
use crate::tensor::{Real, Tensor};

/// Per-class sample counts of a training set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassCounts(pub Vec<usize>);

impl ClassCounts {
    pub fn from_labels(labels: impl IntoIterator<Item = usize>, classes: usize) -> Result<Self> {
        let mut counts = vec![0; classes];
        for l in labels {
            *counts
                .get_mut(l)
                .ok_or_else(|| Error::data(format!("label {l} outside {classes} classes")))? += 1;
        }
        Ok(ClassCounts(counts))
    }

    pub fn balanced(classes: usize, per_class: usize) -> Self {
        ClassCounts(vec![per_class; classes])
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    /// Inverse effective-number weights `(1 − β)/(1 − βⁿ)`, scaled to sum to the
    /// class count. Empty classes are treated as holding one sample.
    pub fn weights(&self, beta: f64) -> Result<Vec<f64>> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::param(format!("class-balance beta {beta} outside [0, 1)")));
        }
        let raw: Vec<f64> = self
            .0
            .iter()
            .map(|&n| (1.0 - beta) / (1.0 - beta.powi(n.max(1) as i32)))
            .collect();
        let total: f64 = raw.iter().sum();
        let k = raw.len() as f64;
        Ok(raw.into_iter().map(|w| w * k / total).collect())
    }
}

/// Which training objective to use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    CrossEntropy,
    ClassBalancedFocal { gamma: f64, beta: f64 },
}

fn check_labels(shape: &[usize], labels: &[usize]) -> Result<(usize, usize)> {
    let (n, c) = match shape {
        [n, c] => (*n, *c),
        _ => return Err(Error::shape(format!("loss expects (batch, classes) logits, got {shape:?}"))),
    };
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::data(format!("label {bad} outside {c} classes")));
    }
    Ok((n, c))
}

fn log_probs(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - lse).collect()
}

/// Loss value and its gradient with respect to the logits, both batch means.
fn focal_terms<T: Real>(logits: &Tensor<T>, labels: &[usize], weights: Option<&[f64]>, gamma: f64) -> (f64, Vec<T>) {
    let c = logits.dim(1);
    let n = labels.len();
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * c);
    for (row, &y) in logits.data().chunks_exact(c).zip(labels) {
        let z: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        let lp = log_probs(&z);
        let w = weights.map_or(1.0, |w| w[y]);
        let log_pt = lp[y];
        let pt = log_pt.exp();
        // 1 − p_t without cancellation when p_t is close to 1.
        let q = -log_pt.exp_m1();
        let modulation = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
        loss += w * modulation * -log_pt;
        // dL/dz_k = w · p_t · F'(p_t) · (δ_yk − s_k), with F(p) = −(1 − p)^γ ln p.
        let pt_dfdp = if gamma == 0.0 {
            -1.0
        } else if q == 0.0 {
            0.0
        } else {
            gamma * q.powf(gamma - 1.0) * pt * log_pt - modulation
        };
        for (k, &l) in lp.iter().enumerate() {
            let delta = if k == y { 1.0 } else { 0.0 };
            grad.push(T::lit(w * pt_dfdp * (delta - l.exp()) / n as f64));
        }
    }
    (loss / n as f64, grad)
}

struct SavedGradRule<T> {
    grad: Vec<T>,
}

impl<T: Real> Backward<T> for SavedGradRule<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let up = ctx.grad[0];
        vec![Some(self.grad.iter().map(|&g| g * up).collect())]
    }
}

/// Mean of `−log softmax(logits)[label]`.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    check_labels(logits.shape(), labels)?;
    Ok(focal_terms(logits, labels, None, 0.0).0)
}

/// Mean of `w_y · (1 − p_t)^γ · (−log p_t)` with class-balanced weights `w_y`.
pub fn cb_focal_loss<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
    counts: &ClassCounts,
    gamma: f64,
    beta: f64,
) -> Result<f64> {
    let (_, c) = check_labels(logits.shape(), labels)?;
    let w = focal_weights(counts, c, gamma, beta)?;
    Ok(focal_terms(logits, labels, Some(&w), gamma).0)
}

fn focal_weights(counts: &ClassCounts, classes: usize, gamma: f64, beta: f64) -> Result<Vec<f64>> {
    if !(gamma >= 0.0) {
        return Err(Error::param(format!("focal gamma {gamma} must be non-negative")));
    }
    if counts.classes() != classes {
        return Err(Error::shape(format!(
            "class counts cover {} classes, logits have {classes}",
            counts.classes()
        )));
    }
    counts.weights(beta)
}

impl<T: Real> Tape<T> {
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        check_labels(self.shape(logits), labels)?;
        let (loss, grad) = focal_terms(self.value(logits), labels, None, 0.0);
        Ok(self.record(Tensor::scalar(T::lit(loss)), vec![logits], Box::new(SavedGradRule { grad })))
    }

    pub fn cb_focal_loss(
        &mut self,
        logits: Var,
        labels: &[usize],
        counts: &ClassCounts,
        gamma: f64,
        beta: f64,
    ) -> Result<Var> {
        let (_, c) = check_labels(self.shape(logits), labels)?;
        let w = focal_weights(counts, c, gamma, beta)?;
        let (loss, grad) = focal_terms(self.value(logits), labels, Some(&w), gamma);
        Ok(self.record(Tensor::scalar(T::lit(loss)), vec![logits], Box::new(SavedGradRule { grad })))
    }

    pub fn loss(&mut self, kind: LossKind, logits: Var, labels: &[usize], counts: &ClassCounts) -> Result<Var> {
        match kind {
            LossKind::CrossEntropy => self.cross_entropy(logits, labels),
            LossKind::ClassBalancedFocal { gamma, beta } => self.cb_focal_loss(logits, labels, counts, gamma, beta),
        }
    }
}
