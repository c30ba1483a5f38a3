//! Group-wise pruning of learned group convolutions.
//!
//! A learned group convolution has weights `(O, I)`; output channel `o` belongs
//! to group `o % G`. Pruning removes whole `(group, input)` connections: every
//! weight from input `i` into the outputs of group `g`.

use crate::error::{Error, Result};
use crate::ops::GroupMask;
use crate::tensor::{Real, Tensor};

/// How the final per-group pruning target is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrunePolicy {
    /// Each stage removes `floor(I / cf)` inputs per group, so
    /// `(cf − 1)·floor(I / cf)` are gone after the last stage.
    CondensationFactor,
    /// Total pruned across groups is `I·(C − p)` with cardinality `C = O`.
    Cardinality,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LgcState {
    pub layer_id: usize,
    pub groups: usize,
    pub in_channels: usize,
    /// Equal to the cardinality `C`.
    pub out_channels: usize,
    pub pruning_p: usize,
    pub condensation_factor: usize,
    pub policy: PrunePolicy,
    /// `mask[g][i]` is true while input `i` still feeds group `g`.
    pub mask: Vec<Vec<bool>>,
    /// Last condensing stage applied; 0 before any.
    pub stage_index: usize,
}

impl LgcState {
    pub fn new(
        layer_id: usize,
        groups: usize,
        in_channels: usize,
        out_channels: usize,
        pruning_p: usize,
        condensation_factor: usize,
        policy: PrunePolicy,
    ) -> Result<Self> {
        if groups == 0 || in_channels == 0 || out_channels == 0 || condensation_factor == 0 {
            return Err(Error::config("learned group convolution sizes must be positive"));
        }
        Ok(LgcState {
            layer_id,
            groups,
            in_channels,
            out_channels,
            pruning_p,
            condensation_factor,
            policy,
            mask: vec![vec![true; in_channels]; groups],
            stage_index: 0,
        })
    }

    pub fn cardinality(&self) -> usize {
        self.out_channels
    }

    pub fn final_stage(&self) -> usize {
        self.condensation_factor.saturating_sub(1)
    }

    pub fn pruned_in_group(&self, g: usize) -> usize {
        self.mask[g].iter().filter(|&&k| !k).count()
    }

    pub fn pruned_total(&self) -> usize {
        (0..self.groups).map(|g| self.pruned_in_group(g)).sum()
    }

    pub fn kept_total(&self) -> usize {
        self.groups * self.in_channels - self.pruned_total()
    }

    pub fn is_full(&self) -> bool {
        self.mask.iter().all(|row| row.iter().all(|&k| k))
    }

    /// Kept input indices per group, ascending.
    pub fn group_mask(&self) -> GroupMask {
        GroupMask {
            groups: self.groups,
            in_channels: self.in_channels,
            kept: self
                .mask
                .iter()
                .map(|row| row.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect())
                .collect(),
        }
    }

    /// Final pruned count per group under the state's policy.
    pub fn final_targets(&self) -> Result<Vec<usize>> {
        match self.policy {
            PrunePolicy::CondensationFactor => {
                let per_group = self.final_stage() * (self.in_channels / self.condensation_factor);
                Ok(vec![per_group; self.groups])
            }
            PrunePolicy::Cardinality => Ok(prune_target_total(self)?.per_group),
        }
    }

    fn check_weights<T: Real>(&self, w: &Tensor<T>) -> Result<()> {
        if w.shape() != [self.out_channels, self.in_channels] {
            return Err(Error::contract(format!(
                "weights {:?} do not match pruning state ({}, {})",
                w.shape(),
                self.out_channels,
                self.in_channels
            )));
        }
        Ok(())
    }

    /// Sets every weight of a pruned `(group, input)` connection to zero.
    pub fn apply_mask<T: Real>(&self, w: &mut Tensor<T>) -> Result<()> {
        self.check_weights(w)?;
        let i_n = self.in_channels;
        for (o, row) in w.data_mut().chunks_exact_mut(i_n).enumerate() {
            let keep = &self.mask[o % self.groups];
            for (v, &k) in row.iter_mut().zip(keep) {
                if !k {
                    *v = T::zero();
                }
            }
        }
        Ok(())
    }

    /// Elementwise keep-flags over the `(O, I)` weight tensor.
    pub fn weight_mask(&self) -> Vec<bool> {
        (0..self.out_channels)
            .flat_map(|o| self.mask[o % self.groups].iter().copied())
            .collect()
    }
}

/// Sum of `|W[o, i]|` over the outputs `o` of group `g`; 0 for pruned pairs.
pub fn l1_group_scores<T: Real>(weights: &Tensor<T>, state: &LgcState) -> Result<Vec<Vec<f64>>> {
    state.check_weights(weights)?;
    let mut scores = vec![vec![0.0f64; state.in_channels]; state.groups];
    for (o, row) in weights.data().chunks_exact(state.in_channels).enumerate() {
        let g = o % state.groups;
        for (i, v) in row.iter().enumerate() {
            if state.mask[g][i] {
                scores[g][i] += v.abs().to_f64().unwrap_or(f64::NAN);
            }
        }
    }
    Ok(scores)
}

/// Pruning counts from the cardinality rule `G·C_x = I·C − p·I`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneTarget {
    /// `I·(C − p)`.
    pub total: usize,
    /// Even split of `total`, remainder handed out from group 0 upward.
    pub per_group_raw: Vec<usize>,
    /// What is actually pruned per group after clamping.
    pub per_group: Vec<usize>,
    /// `total` reached the layer's connection count; each group then keeps `min(p, I)` inputs.
    pub saturated: bool,
}

pub fn prune_target_total(state: &LgcState) -> Result<PruneTarget> {
    let c = state.cardinality();
    let p = state.pruning_p;
    if p > c {
        return Err(Error::config(format!("pruning p = {p} exceeds cardinality {c}")));
    }
    let (g, i) = (state.groups, state.in_channels);
    let total = i * (c - p);
    let per_group_raw: Vec<usize> = (0..g).map(|k| total / g + usize::from(k < total % g)).collect();
    let saturated = total >= g * i;
    let per_group = if saturated {
        vec![i - p.min(i); g]
    } else {
        per_group_raw.clone()
    };
    Ok(PruneTarget {
        total,
        per_group_raw,
        per_group,
        saturated,
    })
}

/// Applies condensing `stage`: within each group, the lowest-scoring kept
/// inputs are pruned until `floor(stage·target / (cf − 1))` are gone. Ties go
/// to the lower input index. Pruned weights are zeroed in place.
pub fn select_prune<T: Real>(weights: &mut Tensor<T>, state: &LgcState, stage: usize) -> Result<LgcState> {
    let last = state.final_stage();
    if stage == 0 || stage > last {
        return Err(Error::contract(format!(
            "condensing stage {stage} outside 1..={last}"
        )));
    }
    let scores = l1_group_scores(weights, state)?;
    let targets = state.final_targets()?;
    let mut next = state.clone();
    for g in 0..state.groups {
        let cumulative = stage * targets[g] / last;
        let already = state.pruned_in_group(g);
        if cumulative <= already {
            continue;
        }
        let mut order: Vec<usize> = (0..state.in_channels).filter(|&i| state.mask[g][i]).collect();
        order.sort_by(|&a, &b| scores[g][a].total_cmp(&scores[g][b]).then(a.cmp(&b)));
        for &i in order.iter().take(cumulative - already) {
            next.mask[g][i] = false;
        }
    }
    next.stage_index = state.stage_index.max(stage);
    next.apply_mask(weights)?;
    Ok(next)
}

/// Fraction of training over which condensing stages are spread.
pub const DEFAULT_CONDENSE_FRACTION: f64 = 0.5;

/// Condensing stage that fires at `epoch`, if any, with stages spread over the
/// first half of training.
pub fn prune_schedule(epoch: usize, total_epochs: usize, condensation_factor: usize) -> Option<usize> {
    prune_schedule_with(epoch, total_epochs, condensation_factor, DEFAULT_CONDENSE_FRACTION)
}

/// Stage `k` fires at `floor(k·total·fraction / (cf − 1))`. When several stages
/// land on the same epoch the highest one is returned; pruning is cumulative so
/// it subsumes the others.
pub fn prune_schedule_with(
    epoch: usize,
    total_epochs: usize,
    condensation_factor: usize,
    fraction: f64,
) -> Option<usize> {
    if condensation_factor < 2 || epoch >= total_epochs {
        return None;
    }
    let stages = condensation_factor - 1;
    (1..=stages)
        .rev()
        .find(|&k| trigger_epoch(k, total_epochs, stages, fraction) == epoch)
}

/// Epoch at which stage `k` of `stages` fires.
pub fn trigger_epoch(k: usize, total_epochs: usize, stages: usize, fraction: f64) -> usize {
    let exact = (k * total_epochs) as f64 * fraction / stages as f64;
    // Guard against values like 99.99999999 for products that are exact integers.
    (exact + 1e-9).floor() as usize
}
